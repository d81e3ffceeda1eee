"""Finite-difference acoustic solver on the periodic strip and its discrete adjoint.

The domain is ``(0, L) x (-H, 0)`` sampled on ``(K+1) x (K+1)`` nodes.  Mesh
arrays are indexed ``[iz, ix]`` with ``iz = 0`` on the top surface ``z = 0``
and ``iz = K`` on the bottom ``z = -H``.  The sides are periodic, so the node
column ``ix = K`` (``x = L``) is the same physical point as ``ix = 0``.  The
solver works on the ``K`` distinct columns and uses the average of the two
seam columns as the velocity there; records and trajectories are returned with
the seam column duplicated so that every side carries ``K+1`` receivers.

Time stepping is the centred second-order leapfrog

    u^{n+1} = 2 u^n - u^{n-1} + dt^2 m^2 (L u^n + b^n)

with ``L`` the 5-point Laplacian (ghost nodes for the Neumann top and bottom)
and ``b^n`` the boundary forcing from ``du/dz = h`` on the top surface.  The
adjoint sweep is the exact transpose of this recurrence.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import math

import numba
import numpy as np

__all__ = [
    "GridSpec",
    "SourceProfile",
    "ShotRecord",
    "CFLError",
    "InstabilityError",
    "cfl_max_dt",
    "dipole_source",
    "solve_forward",
    "solve_adjoint",
    "time_correlate",
    "seam_gradient",
    "WaveForward",
    "TRAINING_SOURCE_CENTERS",
    "EXTRA_SOURCE_CENTERS",
]

# (positive lobe, negative lobe) centres of the top sources
TRAINING_SOURCE_CENTERS = ((0.8, 0.2), (0.4, 0.7), (0.6, 0.3))
EXTRA_SOURCE_CENTERS = ((0.7, 0.2), (0.3, 0.9), (0.2, 0.5), (0.1, 0.6))

RECEIVER_SIDES = ("bottom", "top", "both")


class CFLError(ValueError):
    """Requested time step exceeds the stability bound."""

    def __init__(self, dt, max_dt):
        super().__init__(f"dt={dt:.6g} violates the CFL bound; admissible dt <= {max_dt:.6g}")
        self.dt = dt
        self.max_dt = max_dt


class InstabilityError(RuntimeError):
    """Non-finite values appeared during time stepping."""

    def __init__(self, step):
        super().__init__(f"wavefield became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class GridSpec:
    """Mesh, time step and recording schedule."""

    length_x: float = 1.0
    depth_z: float = 1.0
    cells_per_side: int = 50
    dt: float = 5e-4
    t_final: float = 0.5
    record_start: float = 0.0
    record_stride: int = 20
    receiver_side: str = "bottom"

    def __post_init__(self):
        if self.cells_per_side < 2:
            raise ValueError("cells_per_side must be >= 2")
        if not (self.dt > 0 and self.t_final > 0):
            raise ValueError("dt and t_final must be positive")
        if self.length_x <= 0 or self.depth_z <= 0:
            raise ValueError("domain extents must be positive")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        if self.receiver_side not in RECEIVER_SIDES:
            raise ValueError(f"receiver_side must be one of {RECEIVER_SIDES}")
        nt = self.t_final / self.dt
        if abs(nt - round(nt)) > 1e-9 * nt:
            raise ValueError("t_final must be an integer multiple of dt")
        n0 = self.record_start / self.dt
        if self.record_start < 0 or abs(n0 - round(n0)) > 1e-9 * max(n0, 1.0):
            raise ValueError("record_start must be a nonnegative multiple of dt")
        if round(n0) > round(nt):
            raise ValueError("record_start beyond t_final")

    @property
    def dx(self) -> float:
        return self.length_x / self.cells_per_side

    @property
    def dz(self) -> float:
        return self.depth_z / self.cells_per_side

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    @property
    def first_record(self) -> int:
        return int(round(self.record_start / self.dt))

    @property
    def n_records(self) -> int:
        return (self.n_steps - self.first_record) // self.record_stride + 1

    @property
    def record_steps(self) -> np.ndarray:
        return self.first_record + self.record_stride * np.arange(self.n_records)

    @property
    def record_times(self) -> np.ndarray:
        return self.record_steps * self.dt

    @property
    def n_receivers(self) -> int:
        sides = 2 if self.receiver_side == "both" else 1
        return sides * (self.cells_per_side + 1)

    @property
    def receiver_rows(self) -> tuple:
        return {"bottom": (self.cells_per_side,), "top": (0,), "both": (self.cells_per_side, 0)}[self.receiver_side]

    @property
    def shape(self) -> tuple:
        return (self.cells_per_side + 1, self.cells_per_side + 1)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.cells_per_side + 1) * self.dx

    @property
    def z(self) -> np.ndarray:
        return -np.arange(self.cells_per_side + 1) * self.dz

    def replace(self, **changes) -> "GridSpec":
        d = asdict(self)
        d.update(changes)
        return GridSpec(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**d)

    def quadrature_weights(self) -> np.ndarray:
        """Trapezoid weights for integrals over the mesh."""
        qz = np.full(self.cells_per_side + 1, self.dz)
        qz[[0, -1]] *= 0.5
        qx = np.full(self.cells_per_side + 1, self.dx)
        qx[[0, -1]] *= 0.5
        return np.outer(qz, qx)

    def record_weights(self) -> np.ndarray:
        """Trapezoid weights in recorded time and receiver position, shape (n_records, n_receivers)."""
        qt = np.full(self.n_records, self.dt * self.record_stride)
        if self.n_records > 1:
            qt[[0, -1]] *= 0.5
        qx = np.full(self.cells_per_side + 1, self.dx)
        qx[[0, -1]] *= 0.5
        qd = np.tile(qx, self.n_receivers // (self.cells_per_side + 1))
        return np.outer(qt, qd)


@dataclass
class SourceProfile:
    """Separable top-boundary flux ``h(t, x) = a(t) b(x)``.

    ``temporal`` holds ``a`` at the time levels ``0..n_steps``; ``None`` means
    the constant 1 (switched on at ``t = 0``).
    """

    spatial: np.ndarray
    temporal: np.ndarray | None = None

    def __post_init__(self):
        self.spatial = np.asarray(self.spatial, dtype=float)
        if self.temporal is not None:
            self.temporal = np.asarray(self.temporal, dtype=float)

    def check(self, grid: GridSpec):
        if self.spatial.shape != (grid.cells_per_side + 1,):
            raise ValueError(f"source has {self.spatial.size} spatial samples, grid needs {grid.cells_per_side + 1}")
        if self.temporal is not None and self.temporal.shape != (grid.n_steps + 1,):
            raise ValueError(f"temporal profile needs {grid.n_steps + 1} samples")

    def amplitudes(self, grid: GridSpec) -> np.ndarray:
        if self.temporal is None:
            return np.ones(grid.n_steps + 1)
        return self.temporal


@dataclass
class ShotRecord:
    traces: np.ndarray  # (n_records, n_receivers)
    grid: GridSpec
    source_id: int = 0


def dipole_source(grid: GridSpec, plus: float, minus: float, width: float = 0.01) -> SourceProfile:
    """``exp(-(x-plus)^2/width) - exp(-(x-minus)^2/width)`` on the top nodes."""
    x = grid.x
    b = np.exp(-((x - plus) ** 2) / width) - np.exp(-((x - minus) ** 2) / width)
    return SourceProfile(b)


def cfl_max_dt(grid: GridSpec, m_max: float) -> float:
    """Largest stable time step, ``min(dx, dz) / (sqrt(2) m_max)``."""
    if not m_max > 0:
        raise ValueError("m_max must be positive")
    return min(grid.dx, grid.dz) / (math.sqrt(2.0) * m_max)


# ---------------------------------------------------------------------------
# kernels; arrays here are (K+1, K): rows iz, distinct columns ix


@numba.njit(cache=True)
def _laplacian(u, out, idx2, idz2):
    nz, nx = u.shape
    last = nz - 1
    for i in range(nz):
        for j in range(nx):
            jl = j - 1 if j > 0 else nx - 1
            jr = j + 1 if j < nx - 1 else 0
            lx = (u[i, jl] - 2.0 * u[i, j] + u[i, jr]) * idx2
            if i == 0:
                lz = 2.0 * (u[1, j] - u[0, j]) * idz2
            elif i == last:
                lz = 2.0 * (u[last - 1, j] - u[last, j]) * idz2
            else:
                lz = (u[i - 1, j] - 2.0 * u[i, j] + u[i + 1, j]) * idz2
            out[i, j] = lx + lz


@numba.njit(cache=True)
def _laplacian_t(w, out, scratch, idx2, idz2):
    # L^T = W L W^{-1} with W the row weights (1/2 on the two Neumann rows)
    nz = w.shape[0]
    scratch[:, :] = w
    scratch[0, :] *= 2.0
    scratch[nz - 1, :] *= 2.0
    _laplacian(scratch, out, idx2, idz2)
    out[0, :] *= 0.5
    out[nz - 1, :] *= 0.5


@numba.njit(cache=True)
def _finite(u):
    nz, nx = u.shape
    for i in range(nz):
        for j in range(nx):
            if not np.isfinite(u[i, j]):
                return False
    return True


@numba.njit(cache=True)
def _forward_kernel(c2, top, amp, rows, first, stride, nrec, idx2, idz2, records, traj, keep):
    """Leapfrog sweep for one source.

    c2 = (dt m)^2; top = 2 b / dz (forcing added to the top-row Laplacian);
    amp = a(t_n); records (nrec, len(rows), nx) is filled in place;
    traj (nt+1, nz, nx) is filled when keep is true.
    Returns -1 on success or the step at which the field became non-finite.
    """
    nz, nx = c2.shape
    nt = amp.shape[0] - 1
    up = np.zeros((nz, nx))
    u = np.zeros((nz, nx))
    un = np.zeros((nz, nx))
    lap = np.zeros((nz, nx))
    if first == 0:
        for r in range(rows.shape[0]):
            records[0, r, :] = 0.0
    if keep:
        traj[0, :, :] = 0.0
    for n in range(nt):
        _laplacian(u, lap, idx2, idz2)
        a = amp[n]
        for j in range(nx):
            lap[0, j] += a * top[j]
        if n == 0:
            for i in range(nz):
                for j in range(nx):
                    un[i, j] = u[i, j] + 0.5 * c2[i, j] * lap[i, j]
        else:
            for i in range(nz):
                for j in range(nx):
                    un[i, j] = 2.0 * u[i, j] - up[i, j] + c2[i, j] * lap[i, j]
        tmp = up
        up = u
        u = un
        un = tmp
        step = n + 1
        if keep:
            traj[step, :, :] = u
        if step >= first and (step - first) % stride == 0:
            k = (step - first) // stride
            if k < nrec:
                for r in range(rows.shape[0]):
                    records[k, r, :] = u[rows[r], :]
        if step % 50 == 0 or step == nt:
            if not _finite(u):
                return step
    return -1


@numba.njit(cache=True)
def _adjoint_sweep(c2, inj, cot, rows, first, stride, nrec, idx2, idz2, utraj, traj, mode):
    """Reverse sweep of the leapfrog recurrence.

    The adjoint field is w^{n-1} = dt m^2 lambda^n where lambda^n = dJ/du^n, so

        w^{n-1} = 2 w^n - w^{n+1} + c2 * (L^T w^n) + inj * S^T cot(n)

    with w^{nt} = w^{nt+1} = 0 and inj = dt m^2.  mode 1 stores the whole
    trajectory in traj; mode 2 accumulates sum_n (w^n - w^{n-1})(u^n - u^{n-1})
    against the stored forward trajectory utraj and returns it.
    """
    nz, nx = c2.shape
    nt = traj.shape[0] - 1 if mode == 1 else utraj.shape[0] - 1
    wp = np.zeros((nz, nx))
    w = np.zeros((nz, nx))
    wn = np.zeros((nz, nx))
    lap = np.zeros((nz, nx))
    scratch = np.zeros((nz, nx))
    acc = np.zeros((nz, nx))
    if mode == 1:
        traj[nt, :, :] = 0.0
    for n in range(nt, 0, -1):
        _laplacian_t(w, lap, scratch, idx2, idz2)
        for i in range(nz):
            for j in range(nx):
                wn[i, j] = 2.0 * w[i, j] - wp[i, j] + c2[i, j] * lap[i, j]
        if n >= first and (n - first) % stride == 0:
            k = (n - first) // stride
            if k < nrec:
                for r in range(rows.shape[0]):
                    row = rows[r]
                    for j in range(nx):
                        wn[row, j] += inj[row, j] * cot[k, r, j]
        if mode == 1:
            traj[n - 1, :, :] = wn
        else:
            for i in range(nz):
                for j in range(nx):
                    acc[i, j] += (w[i, j] - wn[i, j]) * (utraj[n, i, j] - utraj[n - 1, i, j])
        tmp = wp
        wp = w
        w = wn
        wn = tmp
        if n % 50 == 0 and not _finite(w):
            return acc, n
    return acc, -1


# ---------------------------------------------------------------------------
# seam handling between (K+1)-column mesh arrays and the K distinct columns


def _interior_velocity(m: np.ndarray, grid: GridSpec) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != grid.shape:
        raise ValueError(f"velocity field has shape {m.shape}, grid needs {grid.shape}")
    mu = m[:, :-1].copy()
    mu[:, 0] = 0.5 * (m[:, 0] + m[:, -1])
    return mu


def _fold_seam_gradient(g: np.ndarray) -> np.ndarray:
    """Adjoint of ``_interior_velocity``: distinct-column gradient to mesh gradient."""
    out = np.empty((g.shape[0], g.shape[1] + 1))
    out[:, :-1] = g
    out[:, 0] = 0.5 * g[:, 0]
    out[:, -1] = 0.5 * g[:, 0]
    return out


def _with_seam(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a, a[..., :1]], axis=-1)


def _check_velocity(m_int: np.ndarray, grid: GridSpec):
    if not np.all(np.isfinite(m_int)) or np.any(m_int <= 0):
        raise ValueError("velocity must be finite and strictly positive")
    bound = cfl_max_dt(grid, float(m_int.max()))
    if grid.dt > bound * (1 + 1e-12):
        raise CFLError(grid.dt, bound)


def _run_forward(m_int, grid, src: SourceProfile, keep):
    src.check(grid)
    K = grid.cells_per_side
    c2 = (grid.dt * m_int) ** 2
    top = 2.0 * src.spatial[:K] / grid.dz
    rows = np.array(grid.receiver_rows, dtype=np.int64)
    nrec = grid.n_records
    records = np.zeros((nrec, rows.size, K))
    traj = np.zeros((grid.n_steps + 1, K + 1, K)) if keep else np.zeros((1, 1, 1))
    status = _forward_kernel(
        c2, top, src.amplitudes(grid), rows, grid.first_record, grid.record_stride, nrec,
        1.0 / grid.dx**2, 1.0 / grid.dz**2, records, traj, keep,
    )
    if status >= 0:
        raise InstabilityError(status)
    # (nrec, sides, K) -> (nrec, sides*(K+1)) with the seam receiver duplicated
    traces = _with_seam(records).reshape(nrec, -1)
    return traces, (traj if keep else None)


def solve_forward(m, src: SourceProfile, grid: GridSpec, keep_trajectory: bool = False):
    """Propagate one source through velocity ``m`` and sample the receivers.

    Parameters
    ----------
    m : ndarray, shape (K+1, K+1)
        Velocity on the mesh nodes.
    src : SourceProfile
    grid : GridSpec
    keep_trajectory : bool
        Also return every time level, shape (n_steps+1, K+1, K+1).

    Returns
    -------
    record : ShotRecord
    trajectory : ndarray or None

    Raises
    ------
    CFLError
        If ``grid.dt`` exceeds ``cfl_max_dt(grid, m.max())``.
    InstabilityError
        If the field turns non-finite.
    """
    m_int = _interior_velocity(m, grid)
    _check_velocity(m_int, grid)
    traces, traj = _run_forward(m_int, grid, src, keep_trajectory)
    if traj is not None:
        traj = _with_seam(traj)
    return ShotRecord(traces, grid), traj


def _fold_cotangent(cot: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Transpose of the seam duplication on receiver traces."""
    K = grid.cells_per_side
    cot = np.asarray(cot, dtype=float)
    if cot.shape != (grid.n_records, grid.n_receivers):
        raise ValueError(f"cotangent has shape {cot.shape}, expected {(grid.n_records, grid.n_receivers)}")
    c = cot.reshape(grid.n_records, -1, K + 1)
    out = c[..., :K].copy()
    out[..., 0] += c[..., K]
    return out


def _run_adjoint(m_int, grid, cot, utraj=None):
    K = grid.cells_per_side
    c2 = (grid.dt * m_int) ** 2
    inj = grid.dt * m_int**2
    rows = np.array(grid.receiver_rows, dtype=np.int64)
    folded = _fold_cotangent(cot, grid)
    if utraj is None:
        traj = np.zeros((grid.n_steps + 1, K + 1, K))
        acc, status = _adjoint_sweep(
            c2, inj, folded, rows, grid.first_record, grid.record_stride, grid.n_records,
            1.0 / grid.dx**2, 1.0 / grid.dz**2, np.zeros((1, 1, 1)), traj, 1,
        )
        result = traj
    else:
        acc, status = _adjoint_sweep(
            c2, inj, folded, rows, grid.first_record, grid.record_stride, grid.n_records,
            1.0 / grid.dx**2, 1.0 / grid.dz**2, utraj, np.zeros((1, 1, 1)), 2,
        )
        result = acc
    if status >= 0:
        raise InstabilityError(status)
    return result


def solve_adjoint(m, adjoint_source, grid: GridSpec) -> np.ndarray:
    """Time-reversed adjoint sweep driven by a receiver cotangent.

    ``adjoint_source`` has the shape of a shot record.  The returned
    trajectory ``w`` (shape (n_steps+1, K+1, K+1), ``w[n_steps] = 0``) is
    scaled so that ``time_correlate(u, w, m)`` is the gradient of
    ``<adjoint_source, record(m)>`` with respect to the velocity at the
    distinct nodes.
    """
    m_int = _interior_velocity(m, grid)
    _check_velocity(m_int, grid)
    return _with_seam(_run_adjoint(m_int, grid, adjoint_source))


def time_correlate(u: np.ndarray, w: np.ndarray, m: np.ndarray, dt: float) -> np.ndarray:
    """``-(2/m^3) sum_n (dw/dt)(du/dt) dt`` with forward differences between levels."""
    u = np.asarray(u)
    w = np.asarray(w)
    if u.shape != w.shape or u.ndim != 3 or u.shape[1:] != np.shape(m):
        raise ValueError("trajectories and velocity must share the mesh and time levels")
    du = np.diff(u, axis=0)
    dw = np.diff(w, axis=0)
    acc = np.einsum("nij,nij->ij", dw, du)
    return -2.0 / (np.asarray(m) ** 3 * dt) * acc


def seam_gradient(g: np.ndarray) -> np.ndarray:
    """Map a node-wise correlation field (seam duplicated) to the mesh gradient.

    The seam velocity is the average of columns 0 and K, so each of them
    receives half of the seam sensitivity.  When the correlation field comes
    from :func:`time_correlate`, pass it a velocity whose two seam columns
    both hold that average.
    """
    return _fold_seam_gradient(np.asarray(g)[:, :-1])


class WaveForward:
    """Multi-source forward map ``m -> g`` with shape (n_sources, n_records, n_receivers).

    Also provides the vector-Jacobian product needed by the adjoint-state
    gradients.
    """

    def __init__(self, grid: GridSpec, sources):
        self.grid = grid
        self.sources = [s if isinstance(s, SourceProfile) else SourceProfile(s) for s in sources]
        for s in self.sources:
            s.check(grid)

    @property
    def data_shape(self) -> tuple:
        return (len(self.sources), self.grid.n_records, self.grid.n_receivers)

    def __call__(self, m) -> np.ndarray:
        m_int = _interior_velocity(m, self.grid)
        _check_velocity(m_int, self.grid)
        out = np.empty(self.data_shape)
        for s, src in enumerate(self.sources):
            out[s], _ = _run_forward(m_int, self.grid, src, False)
        return out

    def value_and_vjp(self, m, cotangent_fn):
        """Forward solve, then pull ``cotangent_fn(data)`` back to a mesh gradient.

        ``cotangent_fn`` receives the full data bundle and returns
        ``(value, cotangent)``; this lets the caller form residuals before the
        adjoint sweeps run.  Trajectories are kept one source at a time only
        during the adjoint stage.
        """
        m_int = _interior_velocity(m, self.grid)
        _check_velocity(m_int, self.grid)
        data = self(m)
        value, cot = cotangent_fn(data)
        cot = np.asarray(cot, dtype=float).reshape(self.data_shape)
        grad = np.zeros_like(m_int)
        for s, src in enumerate(self.sources):
            if not np.any(cot[s]):
                continue
            _, utraj = _run_forward(m_int, self.grid, src, True)
            acc = _run_adjoint(m_int, self.grid, cot[s], utraj)
            grad += acc
        grad *= -2.0 / (m_int**3 * self.grid.dt)
        return value, data, _fold_seam_gradient(grad)

    def vjp(self, m, cotangent) -> np.ndarray:
        _, _, g = self.value_and_vjp(m, lambda d: (0.0, cotangent))
        return g
