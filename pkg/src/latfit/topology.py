"""Integer reparametrisations between fitted lattices and their chain topology.

Two fits of the same lattice differ by an integer relabeling (B, t) with
det B = 1; rounding A1 A2^{-1} and the transported phase recovers it whenever
both pairs are regular and close (|y1 - y2| <= 3 lam / 2).  Products of the
step reparametrisations along closed chains are the generalized Burgers
vectors; they are exact integers, so every chain identity is tested exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_model import AffinePair, Configuration, ModelParams, is_regular_pair, j_lambda


class ReparamError(RuntimeError):
    """Raised when no valid integer reparametrisation connects two fits."""


class AmbiguousReparamError(ReparamError):
    """Rounding gap too large: the points are not mutually regular enough."""


class IrregularSampleError(RuntimeError):
    """A chain/loop sample point failed the regular-pair gate."""


def _int_det(b: np.ndarray) -> int:
    d = b.shape[0]
    if d == 2:
        return int(b[0, 0]) * int(b[1, 1]) - int(b[0, 1]) * int(b[1, 0])
    if d == 3:
        return (int(b[0, 0]) * (int(b[1, 1]) * int(b[2, 2]) - int(b[1, 2]) * int(b[2, 1]))
                - int(b[0, 1]) * (int(b[1, 0]) * int(b[2, 2]) - int(b[1, 2]) * int(b[2, 0]))
                + int(b[0, 2]) * (int(b[1, 0]) * int(b[2, 1]) - int(b[1, 1]) * int(b[2, 0])))
    return int(round(float(np.linalg.det(b))))


@dataclass(frozen=True)
class Reparam:
    """Integer lattice relabeling (B, t) with det B = 1; acts as (A, tau) -> (BA, B tau + t)."""

    B: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        b = np.array(self.B, dtype=np.int64)
        t = np.array(self.t, dtype=np.int64)
        if b.ndim != 2 or b.shape[0] != b.shape[1] or t.shape != (b.shape[0],):
            raise ValueError(f"inconsistent shapes B {b.shape}, t {t.shape}")
        if _int_det(b) != 1:
            raise ValueError(f"reparametrisation requires det B = 1, got {_int_det(b)}")
        b.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "B", b)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls, d: int) -> "Reparam":
        return cls(np.eye(d, dtype=np.int64), np.zeros(d, dtype=np.int64))

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.B, np.eye(self.d, dtype=np.int64))
                    and np.all(self.t == 0))

    def apply(self, aff: AffinePair) -> AffinePair:
        return AffinePair(self.B @ aff.A, self.B @ aff.tau + self.t)

    def inverse(self) -> "Reparam":
        binv = np.round(np.linalg.inv(self.B)).astype(np.int64)
        return Reparam(binv, -binv @ self.t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Reparam):
            return NotImplemented
        return bool(np.array_equal(self.B, other.B) and np.array_equal(self.t, other.t))

    def __hash__(self):
        return hash((self.B.tobytes(), self.t.tobytes()))


def compose(b1: Reparam, b2: Reparam) -> Reparam:
    """Composition of the affine relabelings: (B1 B2, B1 t2 + t1)."""
    return Reparam(b1.B @ b2.B, b1.B @ b2.t + b1.t)


def chain_product(steps) -> Reparam:
    """Left fold of the step reparametrisations (ChainSteps or Reparams)."""
    reps = [s.reparam if isinstance(s, ChainStep) else s for s in steps]
    if not reps:
        raise ValueError("chain_product needs at least one step")
    out = reps[0]
    for r in reps[1:]:
        out = compose(out, r)
    return out


@dataclass(frozen=True)
class ChainStep:
    """One jump between fitted pairs with its residuals and theorem bounds."""

    y1: np.ndarray
    y2: np.ndarray
    aff1: AffinePair
    aff2: AffinePair
    reparam: Reparam
    delta_a: float          # |id - A1^{-1} B A2|_F
    delta_tau: float        # |B tau2 + t - tau1 - ((B A2 + A1)/2)(y2 - y1)|
    bound_a: float
    bound_tau: float
    j1: float
    j2: float
    gap: float              # max distance to the nearest integer before rounding


def _as_point_aff(fit):
    """Accept (y, AffinePair), FitResult, or BranchPoint."""
    if hasattr(fit, "aff_hat"):
        return np.asarray(fit.position, dtype=float), fit.aff_hat
    if hasattr(fit, "aff_tilde"):
        return np.asarray(fit.position, dtype=float), fit.aff_tilde
    y, aff = fit
    return np.asarray(y, dtype=float), aff


def find_reparam(fit1, fit2, chi: Configuration, params: ModelParams) -> ChainStep:
    """Unique reparametrisation connecting two nearby fitted pairs.

    B is the rounding of A1 A2^{-1}; t rounds the transported phase mismatch.
    A rounding gap above 0.25 means the integer candidate is not safely
    unique and the step is refused.
    """
    y1, aff1 = _as_point_aff(fit1)
    y2, aff2 = _as_point_aff(fit2)
    lam = params.lam
    dy = y2 - y1
    sep = float(np.linalg.norm(dy))
    if sep > 1.5 * lam + 1e-9:
        raise ValueError(f"points are {sep:g} apart; chain steps require <= 1.5*lam = {1.5 * lam:g}")

    r = aff1.A @ np.linalg.inv(aff2.A)
    b = np.round(r)
    gap_b = float(np.max(np.abs(r - b)))
    if gap_b > 0.25:
        raise AmbiguousReparamError(
            f"ambiguous reparametrisation: A-rounding gap {gap_b:.3f} > 0.25")
    b = b.astype(np.int64)
    if _int_det(b) != 1:
        raise ReparamError(f"orientation/volume mismatch: det B = {_int_det(b)}")

    ba2 = b @ aff2.A
    t_real = aff1.tau + 0.5 * (ba2 + aff1.A) @ dy - b @ aff2.tau
    t = np.round(t_real)
    gap_t = float(np.max(np.abs(t_real - t)))
    if gap_t > 0.25:
        raise AmbiguousReparamError(
            f"ambiguous reparametrisation: tau-rounding gap {gap_t:.3f} > 0.25")
    rep = Reparam(b, t.astype(np.int64))

    delta_a = float(np.linalg.norm(np.eye(chi.d) - np.linalg.inv(aff1.A) @ ba2))
    delta_tau = float(np.linalg.norm(rep.B @ aff2.tau + rep.t - aff1.tau - 0.5 * (ba2 + aff1.A) @ dy))

    j1 = j_lambda(aff1, chi, y1, lam)
    j2 = j_lambda(aff2, chi, y2, lam)
    jmax = max(j1, j2)
    det2 = float(np.linalg.det(aff2.A))
    geom = (2.0 * lam / (2.0 * lam - sep)) ** (chi.d / 2.0)
    dc = params.constants
    bound_a = dc.cA_J / math.sqrt(det2) * geom * math.sqrt(jmax) / lam
    bound_tau = dc.ctau_J * float(np.linalg.norm(aff1.A, 2)) / math.sqrt(det2) * geom * math.sqrt(jmax)

    return ChainStep(y1=y1, y2=y2, aff1=aff1, aff2=aff2, reparam=rep,
                     delta_a=delta_a, delta_tau=delta_tau,
                     bound_a=bound_a, bound_tau=bound_tau,
                     j1=j1, j2=j2, gap=max(gap_b, gap_t))


def triangle_check(fit1, fit2, fit3, chi: Configuration, params: ModelParams) -> bool:
    """B13 = B12 B23 and t13 = B12 t23 + t12, exact integer identities."""
    s12 = find_reparam(fit1, fit2, chi, params)
    s23 = find_reparam(fit2, fit3, chi, params)
    s13 = find_reparam(fit1, fit3, chi, params)
    return compose(s12.reparam, s23.reparam) == s13.reparam


def chain_refinement_invariance(chain, insert_index: int, new_fit, chi: Configuration,
                                params: ModelParams, thresholds=None) -> bool:
    """Product invariance when a regular point is inserted at insert_index."""
    fits = [_as_point_aff(f) for f in chain]
    if not 1 <= insert_index <= len(fits) - 1:
        raise ValueError("insert_index must be interior to the chain")
    y_new, aff_new = _as_point_aff(new_fit)
    lam = params.lam
    for nb in (fits[insert_index - 1][0], fits[insert_index][0]):
        if np.linalg.norm(y_new - nb) > 1.5 * lam + 1e-9:
            raise ValueError("inserted point must be within 1.5*lam of both neighbors")
    ok, report = is_regular_pair(y_new, aff_new, chi, params, thresholds)
    if not ok:
        raise IrregularSampleError(
            f"inserted point at {np.array2string(y_new, precision=3)} is not a regular pair")

    def product(points):
        steps = [find_reparam(points[i], points[i + 1], chi, params)
                 for i in range(len(points) - 1)]
        return chain_product(steps)

    refined = fits[:insert_index] + [(y_new, aff_new)] + fits[insert_index:]
    return product(fits) == product(refined)


@dataclass(frozen=True)
class LoopResult:
    """Closed-chain product around a loop of fitted pairs."""

    points: np.ndarray
    steps: tuple
    product: Reparam
    classification: str     # trivial | translation-defect | rotational-defect
    max_delta_a: float
    max_delta_tau: float
    fits: tuple


def express_in_frame(product: Reparam, base_aff: AffinePair, reference_a) -> Reparam:
    """Rewrite a loop product in the label frame of a reference lattice matrix.

    The raw product lives in the label frame of the loop's base fit; if that
    fit is an integer relabeling B0 of the reference frame (B0 = rounding of
    A_base A_ref^{-1}), the frame-independent content is (B0^{-1} B B0,
    B0^{-1} t).
    """
    r = base_aff.A @ np.linalg.inv(np.asarray(reference_a, dtype=float))
    b0 = np.round(r)
    if float(np.max(np.abs(r - b0))) > 0.25:
        raise AmbiguousReparamError("base fit is not an integer relabeling of the reference frame")
    b0 = Reparam(b0.astype(np.int64), np.zeros(product.d, dtype=np.int64))
    b0_inv = b0.inverse()
    return Reparam(b0_inv.B @ product.B @ b0.B, b0_inv.B @ product.t)


def classify_product(product: Reparam) -> str:
    if not np.array_equal(product.B, np.eye(product.d, dtype=np.int64)):
        return "rotational-defect"
    if np.any(product.t != 0):
        return "translation-defect"
    return "trivial"


def densify_loop(points: np.ndarray, max_step: float) -> np.ndarray:
    """Linear interpolation so consecutive samples are at most max_step apart."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / max_step)))
        for j in range(1, n + 1):
            out.append(a + (b - a) * (j / n))
    return np.array(out)


def burgers_loop(chi: Configuration, loop, params: ModelParams, fits=None,
                 thresholds=None, verify_refinement: bool = False) -> LoopResult:
    """Fit every loop sample, connect consecutive fits, and fold the product.

    The loop must be closed (first point equals last) with steps <= 1.5*lam.
    Any irregular sample refuses the loop, naming the sample, so the caller
    can reroute around defect cores.
    """
    pts = np.atleast_2d(np.asarray(loop, dtype=float))
    if pts.shape[0] < 3:
        raise ValueError("a loop needs at least 3 points (closed)")
    if np.linalg.norm(pts[0] - pts[-1]) > 1e-9:
        raise ValueError("loop is not closed (first point must equal last)")
    core = pts[:-1]
    seps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(seps > 1.5 * params.lam + 1e-9):
        raise ValueError(f"loop step {float(np.max(seps)):g} exceeds 1.5*lam; densify first")

    if fits is None:
        from .fitting import fit_global
        fits = [fit_global(chi, p, params) for p in core]
    pairs = [_as_point_aff(f) for f in fits]

    for i, (y, aff) in enumerate(pairs):
        ok, _ = is_regular_pair(y, aff, chi, params, thresholds)
        if not ok:
            raise IrregularSampleError(
                f"loop sample {i} at {np.array2string(y, precision=3)} is not a regular pair")

    steps = [find_reparam(pairs[i], pairs[(i + 1) % len(pairs)], chi, params)
             for i in range(len(pairs))]
    product = chain_product(steps)

    if verify_refinement:
        i_long = int(np.argmax(seps[: len(pairs)]))
        midpoint = 0.5 * (pairs[i_long][0] + pairs[(i_long + 1) % len(pairs)][0])
        from .fitting import fit_global
        mid_fit = fit_global(chi, midpoint, params)
        open_chain = pairs[i_long + 1:] + pairs[: i_long + 1] + [pairs[(i_long + 1) % len(pairs)]]
        if not chain_refinement_invariance(open_chain, len(open_chain) - 1,
                                           mid_fit, chi, params, thresholds):
            raise ReparamError("loop product changed under refinement")

    return LoopResult(points=pts, steps=tuple(steps), product=product,
                      classification=classify_product(product),
                      max_delta_a=max(s.delta_a for s in steps),
                      max_delta_tau=max(s.delta_tau for s in steps),
                      fits=tuple(fits))


@dataclass(frozen=True)
class DriftBound:
    """Accumulated-drift estimate along a chain of regular fits (lhs <= rhs)."""

    lhs_a: float
    rhs_a: float
    lhs_tau: float
    rhs_tau: float
    steps: tuple


def chain_drift_bound(fits, chi: Configuration, params: ModelParams) -> DriftBound:
    """Quantitative drift of A and tau along a chain versus the chained bound.

    b_hat per step uses the geometric factor and the larger endpoint misfit;
    the tau side compares the product translation against the midpoint
    transport between the chain ends.
    """
    pairs = [_as_point_aff(f) for f in fits]
    if len(pairs) < 2:
        raise ValueError("chain needs at least two fits")
    lam = params.lam
    dc = params.constants
    d = chi.d
    js = [j_lambda(aff, chi, y, lam) for y, aff in pairs]

    steps = []
    b_hats = []
    seps = []
    for i in range(len(pairs) - 1):
        step = find_reparam(pairs[i], pairs[i + 1], chi, params)
        steps.append(step)
        sep = float(np.linalg.norm(step.y2 - step.y1))
        seps.append(sep)
        geom = (2.0 * lam / (2.0 * lam - sep)) ** (d / 2.0)
        det_j = float(np.linalg.det(pairs[i + 1][1].A))
        b_hats.append(geom / math.sqrt(det_j) * math.sqrt(max(js[i], js[i + 1])))

    prod = chain_product(steps)
    y0, aff0 = pairs[0]
    yn, affn = pairs[-1]
    bn = prod.B @ affn.A
    lhs_a = float(np.linalg.norm(np.eye(d) - np.linalg.inv(aff0.A) @ bn, 2))
    s_hat = float(np.sum(b_hats))
    rhs_a = dc.cA_J / lam * s_hat * math.exp(dc.cA_J / lam * s_hat)

    lhs_tau = float(np.linalg.norm(
        prod.t + prod.B @ affn.tau - aff0.tau - 0.5 * (bn + aff0.A) @ (yn - y0)))
    a0_op = float(np.linalg.norm(aff0.A, 2))
    rhs_tau = ((dc.C_A * dc.C_absA * dc.ctau_J + dc.cA_J / lam * float(np.sum(seps)))
               * a0_op * s_hat * math.exp(dc.cA_J / lam * s_hat))

    return DriftBound(lhs_a=lhs_a, rhs_a=rhs_a, lhs_tau=lhs_tau, rhs_tau=rhs_tau,
                      steps=tuple(steps))
