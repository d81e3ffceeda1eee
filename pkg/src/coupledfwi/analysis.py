"""Diagnostics: spectral prediction errors, error norms, landscape scans and reports."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import dataclass
import json
from pathlib import Path

import numpy as np

from . import velocity as vel
from .inversion import phi_value, psi_value
from .wave import GridSpec

__all__ = [
    "ScanSpec",
    "spectral_error",
    "error_norms",
    "line_scan",
    "location_scan",
    "local_minima_count",
    "local_minima",
    "landscape_deviation",
    "neumann_rows",
    "emit_report",
    "NEUMANN_COLUMNS",
]

NEUMANN_COLUMNS = ("J", "l2_error", "linf_error", "cpu_seconds")


def spectral_error(m_true, m_pred, modes: int, grid: GridSpec) -> vel.FourierCoeffs:
    """Cosine coefficients of ``m_true - m_pred`` on the first ``modes`` modes per axis."""
    return vel.project_fourier(np.asarray(m_true) - np.asarray(m_pred), modes, grid)


def error_norms(m_true, m_pred, grid: GridSpec) -> tuple:
    """Trapezoid L2 norm over the domain and the nodal max norm of the difference."""
    e = np.asarray(m_true, dtype=float) - np.asarray(m_pred, dtype=float)
    if e.shape != grid.shape:
        raise ValueError("fields do not match the grid")
    return float(np.sqrt(np.sum(grid.quadrature_weights() * e * e))), float(np.abs(e).max())


@dataclass
class ScanSpec:
    """Line scan ``m0 + h phi_k`` for ``h`` in ``[h_lo, h_hi]``.

    ``base`` selects ``m0``: "identity" uses ``m`` itself, "network-roundtrip"
    uses ``op(f(m))``.
    """

    mode: tuple = (1, 1)
    h_lo: float = -1.0
    h_hi: float = 1.0
    samples: int = 41
    base: str = "identity"

    def __post_init__(self):
        if self.samples < 3 or not self.h_lo < self.h_hi:
            raise ValueError("need at least 3 samples and h_lo < h_hi")
        if self.base not in ("identity", "network-roundtrip"):
            raise ValueError(f"unknown base rule {self.base!r}")
        self.mode = tuple(int(k) for k in self.mode)

    @property
    def h(self) -> np.ndarray:
        return np.linspace(self.h_lo, self.h_hi, self.samples)


def _mode_field(grid, k):
    c = np.zeros((max(k) + 1, max(k) + 1))
    c[k[0], k[1]] = 1.0
    return vel.eval_fourier(vel.FourierCoeffs(c), grid)


def line_scan(kind: str, g, m, spec: ScanSpec, op, forward, clamp=None) -> np.ndarray:
    """Squared misfit along a Fourier direction; returns rows ``(h, value)``.

    ``psi``: ``||g - f(m0 + h phi_k)||^2`` in the record norm;
    ``phi``: ``||op(g) - op(f(m0 + h phi_k))||^2`` in the mesh L2 norm.
    Scan velocities are clipped into ``clamp`` when given.
    """
    if kind not in ("psi", "phi"):
        raise ValueError("kind must be 'psi' or 'phi'")
    grid = forward.grid
    phi_k = _mode_field(grid, spec.mode)
    m0 = np.asarray(m, dtype=float) if spec.base == "identity" else op.apply(forward(m))
    out = np.empty((spec.samples, 2))
    # squared norms, i.e. twice the objectives
    for i, h in enumerate(spec.h):
        mh = m0 + h * phi_k
        if clamp is not None:
            mh = np.clip(mh, *clamp)
        val = psi_value(mh, g, forward) if kind == "psi" else phi_value(mh, g, op, forward)
        out[i] = h, 2.0 * val
    return out


def _location_point(args):
    g, template, center, op, forward = args
    gm = vel.GaussianMixture(template.background, [
        vel.GaussianComponent(template.components[0].amplitude, center, template.components[0].cov)
    ] + list(template.components[1:]))
    m = vel.eval_gaussian(gm, forward.grid)
    return psi_value(m, g, forward), phi_value(m, g, op, forward)


def location_scan(g, template: vel.GaussianMixture, xs, zs, op, forward, workers: int = 1) -> dict:
    """Evaluate Psi and Phi while moving the first component of ``template`` over ``xs`` x ``zs``.

    Returns ``{"x", "z", "psi", "phi"}`` with surfaces indexed ``[iz, ix]``.
    """
    xs = np.asarray(xs, dtype=float)
    zs = np.asarray(zs, dtype=float)
    pts = [(g, template, (x, z), op, forward) for z in zs for x in xs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            vals = list(ex.map(_location_point, pts, chunksize=8))
    else:
        vals = [_location_point(p) for p in pts]
    vals = np.array(vals).reshape(zs.size, xs.size, 2)
    return {"x": xs, "z": zs, "psi": vals[..., 0], "phi": vals[..., 1]}


def local_minima(values) -> list:
    """Indices of interior samples strictly below all neighbours (4-neighbourhood in 2-D)."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        if v.size < 3:
            raise ValueError("need at least 3 samples")
        c = v[1:-1]
        idx = np.nonzero((c < v[:-2]) & (c < v[2:]))[0] + 1
        return [int(i) for i in idx]
    if v.ndim == 2:
        if min(v.shape) < 3:
            raise ValueError("need at least 3 samples per axis")
        c = v[1:-1, 1:-1]
        mask = (c < v[:-2, 1:-1]) & (c < v[2:, 1:-1]) & (c < v[1:-1, :-2]) & (c < v[1:-1, 2:])
        return [(int(i) + 1, int(j) + 1) for i, j in zip(*np.nonzero(mask))]
    raise ValueError("values must be 1-D or 2-D")


def local_minima_count(values) -> int:
    return len(local_minima(values))


def landscape_deviation(op, forward, g, m_true, scan_fields, grid: GridSpec) -> np.ndarray:
    """``|sqrt(2 Phi(m)) - ||m - m_true|||`` for every field in ``scan_fields``."""
    q = grid.quadrature_weights()
    target = op.apply(g)
    out = []
    for m in scan_fields:
        r = op.apply(forward(m)) - target
        lhs = np.sqrt(np.sum(q * r * r))
        d = np.asarray(m) - m_true
        out.append(abs(lhs - np.sqrt(np.sum(q * d * d))))
    return np.array(out)


def neumann_rows(result) -> list:
    """Rows ``{J, l2_error, linf_error, cpu_seconds}`` from a Neumann result with ground truth."""
    return [
        {"J": j + 1, "l2_error": l2, "linf_error": li, "cpu_seconds": t}
        for j, (l2, li, t) in enumerate(zip(result.l2_errors, result.linf_errors, result.seconds))
    ]


def _plain(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def emit_report(rows, path, fmt: str = "csv", columns=None) -> Path:
    """Write ``rows`` (a list of dicts) as CSV or JSON with a fixed column order.

    Without ``columns`` the keys of the first row are used, falling back to
    the Neumann table header for an empty CSV.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    cols = list(columns) if columns is not None else (list(rows[0]) if rows else list(NEUMANN_COLUMNS))
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                w.writerow([_plain(r[c]) for c in cols])
    elif fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"columns": cols, "rows": [{c: _plain(r[c]) for c in cols} for r in rows]}, fh, indent=1)
    else:
        raise ValueError("format must be 'csv' or 'json'")
    return path
