"""Atom configurations, local densities, and the pre-energy h = F + J + nu.

Everything here is pure given an immutable Configuration.  The affine pair
(A, tau) parametrizes the candidate lattice A^{-1}(Z^d - tau) + x; J maps the
atoms near x through z_i = A (x_i - x) + tau into the periodic well and sums

    J(A, tau; x) = |A^{-1}|_F^2 / (C_phi lam^d) * sum_i W(z_i) phi(|x_i - x| / lam)

The analytic (A, tau)-gradient and Hessian of J exploit that the cosine well
has a diagonal Hessian.  Flattened parameter order is row-major A then tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np
from scipy.spatial import cKDTree

TWO_PI_CORE = 2.0 * math.pi

from .potentials import (
    DerivedConstants,
    ElasticDensity,
    cphi,
    default_c_a,
    default_elastic,
    derive_constants,
    phi_eval,
    w_eval,
    w_grad,
    w_hess_diag,
)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo, hi]."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float)
        hi = np.array(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box corners must be vectors of equal length")
        if np.any(hi <= lo):
            raise ValueError("box must have positive extent")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def d(self) -> int:
        return self.lo.shape[0]

    def contains(self, points: np.ndarray, pad: float = 0.0, tol: float = 1e-9) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.lo - pad - tol) & (points <= self.hi + pad + tol), axis=1)


@dataclass(frozen=True)
class AffinePair:
    """Candidate lattice parametrization (A, tau); the lattice is A^{-1}(Z^d - tau) + x."""

    A: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        tau = np.array(self.tau, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or tau.shape != (A.shape[0],):
            raise ValueError(f"inconsistent shapes A {A.shape}, tau {tau.shape}")
        if np.linalg.det(A) <= 0:
            raise ValueError("AffinePair requires det A > 0")
        A.setflags(write=False)
        tau.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "tau", tau)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def canonical_tau(self) -> "AffinePair":
        """Same lattice with tau wrapped to [0,1)^d."""
        return AffinePair(self.A, self.tau - np.floor(self.tau))


class Configuration:
    """Atom positions with interior/boundary tags, a domain box, and a cell index.

    The uniform cell index has edge 2*lam; radius queries gather the needed
    ring of cells, so any query radius works (radii <= 2*lam touch only the
    3^d surrounding cells).  Immutable after construction.
    """

    def __init__(self, positions, interior, domain: Box, lam: float, validate: bool = True):
        positions = np.array(positions, dtype=float)
        interior = np.array(interior, dtype=bool)
        if positions.ndim != 2 or positions.shape[1] != domain.d:
            raise ValueError(f"positions must be (N, {domain.d}), got {positions.shape}")
        if interior.shape != (positions.shape[0],):
            raise ValueError("interior mask must have one entry per atom")
        if lam <= 0:
            raise ValueError("lam must be positive")
        if validate and positions.shape[0]:
            if not np.all(domain.contains(positions[interior])):
                raise ValueError("interior atoms must lie inside the domain box")
            outside = positions[~interior]
            if outside.shape[0]:
                in_band = domain.contains(outside, pad=4.0 * lam)
                beyond = domain.contains(outside, pad=0.0)
                if not np.all(in_band & ~beyond):
                    raise ValueError("boundary atoms must lie in the 4*lam band outside the domain")
        positions.setflags(write=False)
        interior.setflags(write=False)
        self.positions = positions
        self.interior = interior
        self.domain = domain
        self.lam = float(lam)
        self.cell_edge = 2.0 * float(lam)
        self._build_index()
        self._hardcore_cache: dict[float, np.ndarray] = {}

    def _build_index(self):
        if self.n_atoms == 0:
            self._origin = np.zeros(self.d)
            self._cells = {}
            return
        self._origin = self.positions.min(axis=0)
        keys = np.floor((self.positions - self._origin) / self.cell_edge).astype(np.int64)
        cells: dict[tuple, list] = {}
        for i, key in enumerate(map(tuple, keys)):
            cells.setdefault(key, []).append(i)
        self._cells = {k: np.array(v, dtype=np.intp) for k, v in cells.items()}

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.domain.d

    def neighbors(self, x, r: float) -> np.ndarray:
        """Indices of all atoms with |x_i - x| <= r (exact, via the cell rings)."""
        if self.n_atoms == 0:
            return np.empty(0, dtype=np.intp)
        x = np.asarray(x, dtype=float)
        center = np.floor((x - self._origin) / self.cell_edge).astype(np.int64)
        rings = int(math.ceil(r / self.cell_edge))
        chunks = []
        for off in product(range(-rings, rings + 1), repeat=self.d):
            got = self._cells.get(tuple(center + np.array(off)))
            if got is not None:
                chunks.append(got)
        if not chunks:
            return np.empty(0, dtype=np.intp)
        idx = np.concatenate(chunks)
        rel = self.positions[idx] - x
        keep = np.einsum("ij,ij->i", rel, rel) <= r * r
        return idx[keep]

    def local_atoms(self, x, r: float):
        """(indices, relative positions, distances) of atoms within r of x."""
        idx = self.neighbors(x, r)
        rel = self.positions[idx] - np.asarray(x, dtype=float)
        dist = np.linalg.norm(rel, axis=1) if idx.size else np.empty(0)
        return idx, rel, dist

    def hardcore_pairs(self, s0: float) -> np.ndarray:
        """All index pairs (i < j) with |x_i - x_j| < s0, cached per s0."""
        cached = self._hardcore_cache.get(s0)
        if cached is not None:
            return cached
        if self.n_atoms < 2:
            pairs = np.empty((0, 2), dtype=np.intp)
        else:
            tree = cKDTree(self.positions)
            pairs = tree.query_pairs(s0, output_type="ndarray")
            if pairs.size:
                diff = self.positions[pairs[:, 0]] - self.positions[pairs[:, 1]]
                strict = np.linalg.norm(diff, axis=1) < s0
                pairs = pairs[strict]
            pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))] if pairs.size else pairs
        pairs.setflags(write=False)
        self._hardcore_cache[s0] = pairs
        return pairs


@dataclass(frozen=True)
class RegularityThresholds:
    """Thresholds of the regular-pair test: |A^{-1}|_F < C_A, density slack, J slack."""

    eps_rho: float
    eps_J: float
    C_A: float

    def __post_init__(self):
        if min(self.eps_rho, self.eps_J, self.C_A) <= 0:
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True)
class ModelParams:
    """Scale and material parameters; lam >> s0 is enforced as lam >= 10 s0."""

    d: int = 2
    lam: float = 12.0
    s0: float = 0.5
    vartheta: float = 1.0
    elastic: ElasticDensity = None
    thresholds: RegularityThresholds = None

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"d must be 2 or 3, got {self.d}")
        if self.lam <= 0 or self.s0 <= 0 or self.vartheta <= 0:
            raise ValueError("lam, s0, vartheta must be positive")
        if self.lam < 10.0 * self.s0:
            raise ValueError(f"mesoscale separation requires lam >= 10*s0, got lam={self.lam}, s0={self.s0}")
        if self.elastic is None:
            object.__setattr__(self, "elastic", default_elastic(self.d))
        if self.elastic.d != self.d:
            raise ValueError("elastic reference dimension does not match d")
        if self.thresholds is None:
            eps_hat = self.low_energy_cutoff()
            object.__setattr__(self, "thresholds", RegularityThresholds(
                eps_rho=0.125,
                eps_J=4.0 * eps_hat / self.elastic.det_e,
                C_A=default_c_a(self.elastic),
            ))

    def low_energy_cutoff(self) -> float:
        """Largest eps_hat for which low-energy points are provably regular."""
        e_op = float(np.linalg.norm(self.elastic.E, 2))
        det_e = self.elastic.det_e
        return 0.25 * min(self.elastic.C1_el * det_e**2,
                          self.elastic.C2_el * e_op**2,
                          self.vartheta * det_e)

    @cached_property
    def constants(self) -> DerivedConstants:
        return derive_constants(self.d, self.s0, self.elastic, c_a=self.thresholds.C_A)

    @property
    def cphi(self) -> float:
        return cphi(self.d)


def low_energy_thresholds(eps_hat: float, params: ModelParams) -> RegularityThresholds:
    """Thresholds certified for points with h_hat <= eps_hat."""
    if not 0 < eps_hat <= params.low_energy_cutoff() + 1e-12:
        raise ValueError(f"eps_hat must be in (0, {params.low_energy_cutoff():g}]")
    det_e = params.elastic.det_e
    return RegularityThresholds(
        eps_rho=2.0 * eps_hat / (params.vartheta * det_e),
        eps_J=4.0 * eps_hat / det_e,
        C_A=default_c_a(params.elastic),
    )


@dataclass(frozen=True)
class EnergyBreakdown:
    f_term: float
    j_term: float
    nu_term: float
    total: float
    rho: float


# ---------------------------------------------------------------------------
# densities and the pre-energy
# ---------------------------------------------------------------------------

def local_density(chi: Configuration, x, scale: float) -> float:
    """rho_scale(x) = (C_phi scale^d)^{-1} sum_i phi(|x_i - x| / scale)."""
    _, _, dist = chi.local_atoms(x, 2.0 * scale)
    if dist.size == 0:
        return 0.0
    return float(np.sum(phi_eval(dist / scale))) / (cphi(chi.d) * scale**chi.d)


def _j_terms(aff: AffinePair, chi: Configuration, x, lam: float):
    """Common gather for J and its derivatives: (rel, weights, z, g, norm const)."""
    _, rel, dist = chi.local_atoms(x, 2.0 * lam)
    w = phi_eval(dist / lam)
    z = rel @ aff.A.T + aff.tau
    ainv = np.linalg.inv(aff.A)
    g = float(np.sum(ainv * ainv))
    return rel, w, z, ainv, g, 1.0 / (cphi(chi.d) * lam**chi.d)


def j_lambda(aff: AffinePair, chi: Configuration, x, lam: float) -> float:
    """Misfit energy of the fitted lattice at x on scale lam."""
    rel, w, z, _, g, c = _j_terms(aff, chi, x, lam)
    if rel.shape[0] == 0:
        return 0.0
    return g * float(np.sum(w_eval(z) * w)) * c


def assemble_j(rel: np.ndarray, w: np.ndarray, aff: AffinePair, c: float,
               want_grad: bool = True, want_hess: bool = True):
    """J and its exact (A, tau)-derivatives from a precomputed gather.

    rel are atom positions relative to x, w their cutoff weights, and
    c = 1/(C_phi lam^d).  Flattened parameter order is row-major A then tau.
    The Hessian assembly uses the diagonal well Hessian; the |A^{-1}|_F^2
    prefactor contributes through the product rule.
    """
    d = aff.d
    n = d * d + d
    if rel.shape[0] == 0:
        return 0.0, (np.zeros(n) if want_grad else None), (np.zeros((n, n)) if want_hess else None)
    z = rel @ aff.A.T + aff.tau
    ainv = np.linalg.inv(aff.A)
    g = float(np.sum(ainv * ainv))
    # share the trig work: W = sum (1 - cos)/2pi^2, grad W = sin/pi, hess = 2 cos
    cos_z = np.cos(TWO_PI_CORE * z)
    s_val = float(np.sum((1.0 - cos_z).sum(axis=1) * w)) / (2.0 * math.pi**2)
    value = c * g * s_val
    if not want_grad:
        return value, None, None

    gw = (np.sin(TWO_PI_CORE * z) / math.pi) * w[:, None]    # (m, d)
    sg_tau = gw.sum(axis=0)                  # (d,)
    sg_a = gw.T @ rel                        # (d, d): entry (k, l) = sum dW_k rel_l w
    g1 = -2.0 * ainv.T @ ainv @ ainv.T       # grad of |A^{-1}|_F^2
    grad = np.empty(n)
    grad[: d * d] = c * (g1 * s_val + g * sg_a).ravel()
    grad[d * d:] = c * g * sg_tau
    if not want_hess:
        return value, grad, None

    hw = (2.0 * cos_z) * w[:, None]          # (m, d), diagonal well Hessian
    h_tt = np.diag(hw.sum(axis=0))
    t_mat = hw.T @ rel                       # (d, d)
    h_at = np.zeros((d * d, d))
    for k in range(d):
        h_at[k * d: (k + 1) * d, k] = t_mat[k]
    h_aa = np.zeros((d * d, d * d))
    for k in range(d):
        q_k = rel.T @ (rel * hw[:, k: k + 1])
        h_aa[k * d: (k + 1) * d, k * d: (k + 1) * d] = q_k

    g1v = g1.ravel()
    sgav = sg_a.ravel()
    hess = np.zeros((n, n))
    hess[: d * d, : d * d] = c * (_g_hess(ainv) * s_val + np.outer(g1v, sgav)
                                  + np.outer(sgav, g1v) + g * h_aa)
    hess[: d * d, d * d:] = c * (np.outer(g1v, sg_tau) + g * h_at)
    hess[d * d:, : d * d] = hess[: d * d, d * d:].T
    hess[d * d:, d * d:] = c * g * h_tt
    hess = 0.5 * (hess + hess.T)
    return value, grad, hess


def gather_weights(chi: Configuration, x, lam: float):
    """(rel, w, c) for the J sums at x: relative positions, cutoff weights, norm."""
    _, rel, dist = chi.local_atoms(x, 2.0 * lam)
    w = phi_eval(dist / lam)
    return rel, w, 1.0 / (cphi(chi.d) * lam**chi.d)


def j_value_grad_hess(aff: AffinePair, chi: Configuration, x, lam: float,
                      want_hess: bool = True):
    """J with its exact (A, tau)-derivatives (single gather wrapper)."""
    rel, w, c = gather_weights(chi, x, lam)
    return assemble_j(rel, w, aff, c, want_hess=want_hess)


def j_grad_aff(aff: AffinePair, chi: Configuration, x, lam: float) -> np.ndarray:
    """Exact gradient of j_lambda wrt (A, tau), flattened row-major A then tau."""
    return j_value_grad_hess(aff, chi, x, lam, want_hess=False)[1]


def _g_hess(ainv: np.ndarray) -> np.ndarray:
    """Hessian of g(A) = |A^{-1}|_F^2 as a (d^2, d^2) matrix (row-major A)."""
    d = ainv.shape[0]
    k = ainv
    out = np.empty((d * d, d * d))
    for a in range(d):
        for b in range(d):
            m = np.zeros((d, d))
            m[a, b] = 1.0
            dg1 = 2.0 * (k.T @ m.T @ k.T @ k @ k.T + k.T @ k @ m @ k @ k.T + k.T @ k @ k.T @ m.T @ k.T)
            out[:, a * d + b] = dg1.ravel()
    return 0.5 * (out + out.T)


def j_hess_aff(aff: AffinePair, chi: Configuration, x, lam: float) -> np.ndarray:
    """Exact symmetric Hessian of j_lambda wrt (A, tau)."""
    return j_value_grad_hess(aff, chi, x, lam, want_hess=True)[2]


def nu_lambda(A, chi: Configuration, x, lam: float, vartheta: float) -> float:
    """Vacancy cost vartheta |det A - rho_lam(x)|."""
    A = np.asarray(A, dtype=float)
    det_a = float(np.linalg.det(A))
    if det_a <= 0:
        raise ValueError(f"nu_lambda requires det A > 0, got {det_a:g}")
    return vartheta * abs(det_a - local_density(chi, x, lam))


def pre_energy(aff: AffinePair, chi: Configuration, x, params: ModelParams) -> EnergyBreakdown:
    """h = F(A) + J(A, tau) + nu(A), parts reported separately."""
    rho = local_density(chi, x, params.lam)
    f_term = params.elastic.f_el(aff.A)
    j_term = j_lambda(aff, chi, x, params.lam)
    nu_term = params.vartheta * abs(float(np.linalg.det(aff.A)) - rho)
    return EnergyBreakdown(f_term=f_term, j_term=j_term, nu_term=nu_term,
                           total=f_term + j_term + nu_term, rho=rho)


# ---------------------------------------------------------------------------
# hardcore and regularity
# ---------------------------------------------------------------------------

def hardcore_violations(chi: Configuration, s0: float) -> list[tuple[int, int]]:
    """All atom index pairs closer than s0 (empty list = finite hardcore energy)."""
    return [tuple(p) for p in chi.hardcore_pairs(s0)]


def dist_to_lattice(aff: AffinePair, rel: np.ndarray) -> np.ndarray:
    """Distance of each relative position to the lattice A^{-1}(Z^d - tau).

    Nearest lattice point searched over the rounded integer label and its
    3^d neighboring offsets (exact for any reasonably conditioned A).
    """
    if rel.shape[0] == 0:
        return np.empty(0)
    d = rel.shape[1]
    z = rel @ aff.A.T + aff.tau
    base = np.round(z)
    ainv = np.linalg.inv(aff.A)
    best = np.full(rel.shape[0], np.inf)
    for off in product((-1.0, 0.0, 1.0), repeat=d):
        pts = (base + np.array(off) - aff.tau) @ ainv.T
        dist = np.linalg.norm(pts - rel, axis=1)
        best = np.minimum(best, dist)
    return best


def split_regular_atoms(chi: Configuration, aff: AffinePair, beta: float, x,
                        lam: float):
    """Partition atoms near x by distance to the fitted lattice.

    Returns (regular indices, irregular indices, rho_reg, rho_irr); the two
    densities sum to rho_lam(x) exactly (same weights, split).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    idx, rel, dist = chi.local_atoms(x, 2.0 * lam)
    w = phi_eval(dist / lam)
    norm = cphi(chi.d) * lam**chi.d
    lattice_dist = dist_to_lattice(aff, rel)
    reg = lattice_dist <= beta
    rho_reg = float(np.sum(w[reg])) / norm
    rho_irr = float(np.sum(w[~reg])) / norm
    return idx[reg], idx[~reg], rho_reg, rho_irr


def default_beta(aff: AffinePair, params: ModelParams) -> float:
    """beta = min(Theta_W / |A|, s0 / 3), the convexity proof's split radius."""
    a_op = float(np.linalg.norm(aff.A, 2))
    return min(params.constants.Theta_W / a_op, params.s0 / 3.0)


@dataclass(frozen=True)
class RegularityReport:
    norm_ainv: float
    c_a: float
    rho: float
    det_a: float
    density_dev: float
    density_allowance: float
    j_value: float
    j_allowance: float
    hardcore_ok: bool
    norm_ok: bool
    density_ok: bool
    j_ok: bool

    @property
    def is_regular(self) -> bool:
        return self.norm_ok and self.density_ok and self.j_ok and self.hardcore_ok


def is_regular_pair(x, aff: AffinePair, chi: Configuration, params: ModelParams,
                    thresholds: RegularityThresholds | None = None):
    """Regular-pair test; returns (bool, RegularityReport with per-condition margins)."""
    thr = thresholds if thresholds is not None else params.thresholds
    lam = params.lam
    norm_ainv = float(np.linalg.norm(np.linalg.inv(aff.A)))
    rho = local_density(chi, x, lam)
    det_a = float(np.linalg.det(aff.A))
    j_val = j_lambda(aff, chi, x, lam)

    hardcore_ok = True
    pairs = chi.hardcore_pairs(params.s0)
    if pairs.size:
        x = np.asarray(x, dtype=float)
        mids = 0.5 * (chi.positions[pairs[:, 0]] + chi.positions[pairs[:, 1]])
        near = np.linalg.norm(mids - x, axis=1) <= 2.0 * lam + params.s0
        hardcore_ok = not bool(np.any(near))

    report = RegularityReport(
        norm_ainv=norm_ainv,
        c_a=thr.C_A,
        rho=rho,
        det_a=det_a,
        density_dev=abs(rho - det_a),
        density_allowance=thr.eps_rho * det_a,
        j_value=j_val,
        j_allowance=thr.eps_J * rho,
        hardcore_ok=hardcore_ok,
        norm_ok=norm_ainv < thr.C_A,
        density_ok=abs(rho - det_a) < thr.eps_rho * det_a,
        j_ok=j_val < thr.eps_J * rho,
    )
    return report.is_regular, report


def gradw_sum_diagnostic(aff: AffinePair, chi: Configuration, x, lam: float,
                         constants: DerivedConstants):
    """(J, alpha^{-1} |A^{-1}|^2 C_phi^{-1} lam^{-d} sum |grad W|^2 phi); lhs >= rhs."""
    rel, w, z, _, g, c = _j_terms(aff, chi, x, lam)
    if rel.shape[0] == 0:
        return 0.0, 0.0
    lhs = g * float(np.sum(w_eval(z) * w)) * c
    gw2 = np.sum(w_grad(z) ** 2, axis=1)
    rhs = g * float(np.sum(gw2 * w)) * c / constants.alpha_nabla
    return lhs, rhs
