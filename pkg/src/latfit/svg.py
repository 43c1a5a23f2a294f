"""Plain SVG 1.1 heatmaps for grid scalar fields; no plotting dependencies.

One colored rectangle per grid node plus a linear legend; invalid nodes are
hatched gray.  All numbers are fixed-format, so output bytes are a pure
function of the input values.
"""

from __future__ import annotations

import math

import numpy as np

# compact viridis-like ramp (position, r, g, b)
_RAMP = (
    (0.00, 68, 1, 84),
    (0.25, 59, 82, 139),
    (0.50, 33, 145, 140),
    (0.75, 94, 201, 98),
    (1.00, 253, 231, 37),
)

CELL = 24
LEGEND_W = 18
PAD = 46


def _color(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    for (p0, r0, g0, b0), (p1, r1, g1, b1) in zip(_RAMP[:-1], _RAMP[1:]):
        if t <= p1:
            s = 0.0 if p1 == p0 else (t - p0) / (p1 - p0)
            return "#%02x%02x%02x" % (round(r0 + s * (r1 - r0)),
                                      round(g0 + s * (g1 - g0)),
                                      round(b0 + s * (b1 - b0)))
    return "#%02x%02x%02x" % _RAMP[-1][1:]


def _f(x: float) -> str:
    return "%.6g" % x


def heatmap_svg(bands: list[tuple[str, np.ndarray]], title: str = "latfit field") -> str:
    """Render one column of heatmap bands (name, (ny, nx) array with NaN gaps)."""
    if not bands:
        raise ValueError("heatmap needs at least one band")
    ny, nx = bands[0][1].shape
    for name, arr in bands:
        if arr.shape != (ny, nx):
            raise ValueError(f"band {name!r} has shape {arr.shape}, expected {(ny, nx)}")
    band_h = ny * CELL + PAD
    width = nx * CELL + LEGEND_W + 110
    height = band_h * len(bands) + 30
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
        f'<title>{title}</title>',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for b, (name, arr) in enumerate(bands):
        top = 24 + b * band_h
        finite = arr[np.isfinite(arr)]
        lo = float(np.min(finite)) if finite.size else 0.0
        hi = float(np.max(finite)) if finite.size else 1.0
        span = hi - lo if hi > lo else 1.0
        parts.append(f'<text x="4" y="{top - 8}" font-family="monospace" font-size="12">{name}</text>')
        for iy in range(ny):
            for ix in range(nx):
                v = arr[iy, ix]
                x = 4 + ix * CELL
                y = top + (ny - 1 - iy) * CELL
                if math.isnan(v):
                    fill = "#c8c8c8"
                else:
                    fill = _color((float(v) - lo) / span)
                parts.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}"/>')
        # legend: vertical ramp with min/max labels
        lx = 8 + nx * CELL + 6
        for k in range(ny * CELL):
            t = 1.0 - k / max(ny * CELL - 1, 1)
            parts.append(f'<rect x="{lx}" y="{top + k}" width="{LEGEND_W}" height="1" fill="{_color(t)}"/>')
        parts.append(f'<text x="{lx + LEGEND_W + 4}" y="{top + 10}" font-family="monospace" '
                     f'font-size="10">{_f(hi)}</text>')
        parts.append(f'<text x="{lx + LEGEND_W + 4}" y="{top + ny * CELL}" font-family="monospace" '
                     f'font-size="10">{_f(lo)}</text>')
    parts.append('</svg>')
    return "\n".join(parts) + "\n"
