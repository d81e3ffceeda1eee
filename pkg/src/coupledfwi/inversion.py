"""Online reconstruction: approximate inverses, Neumann iteration, objectives and BFGS.

An approximate inverse is any object with ``apply(g) -> mesh field`` and,
for the preconditioned objective, ``vjp(g, cot) -> data cotangent``.  The
forward map is any callable ``m -> data`` with a ``value_and_vjp`` method
like :class:`coupledfwi.wave.WaveForward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import time
import warnings

import numpy as np

from . import velocity as vel
from .wave import CFLError, GridSpec, InstabilityError, WaveForward, cfl_max_dt

__all__ = [
    "InverseOperator",
    "NetworkInverse",
    "CallableInverse",
    "make_band_limited_mock",
    "NeumannOpts",
    "NeumannResult",
    "NeumannInstabilityError",
    "BfgsOpts",
    "BfgsResult",
    "Regularizer",
    "apply_inverse",
    "neumann_reconstruct",
    "neumann_direct_series",
    "abstract_neumann",
    "psi_value",
    "psi_gradient",
    "phi_value",
    "phi_gradient",
    "bfgs_minimize",
    "hybrid_reconstruct",
    "stability_ratio",
    "clamp_range",
    "extract_view",
]

log = logging.getLogger(__name__)


class NeumannInstabilityError(RuntimeError):
    def __init__(self, iterate, cause):
        super().__init__(f"forward solve failed at Neumann iterate {iterate}: {cause}")
        self.iterate = iterate


# ---------------------------------------------------------------------------
# approximate inverses


class InverseOperator:
    """Base class: ``apply`` maps a data bundle to a mesh velocity field."""

    has_vjp = False

    def apply(self, g) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, g, cot) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no input VJP")

    def __call__(self, g):
        return self.apply(g)


class CallableInverse(InverseOperator):
    """Wrap plain functions ``apply(g)`` and optionally ``vjp(g, cot)``."""

    def __init__(self, apply, vjp=None):
        self._apply = apply
        self._vjp = vjp
        self.has_vjp = vjp is not None

    def apply(self, g):
        return np.asarray(self._apply(g), dtype=float)

    def vjp(self, g, cot):
        if self._vjp is None:
            return super().vjp(g, cot)
        return np.asarray(self._vjp(g, cot), dtype=float)


class NetworkInverse(InverseOperator):
    """``g -> features^{-1}(P(E(g)))`` for a trained :class:`coupledfwi.nn.Network`.

    Raw network outputs can leave the admissible feature set; for Gaussian
    features the predicted variances are floored at ``var_floor`` before the
    field is built (and the VJP passes no gradient through floored entries).
    """

    has_vjp = True

    def __init__(self, net, features: vel.FeatureSpec, grid: GridSpec, var_floor: float = 1e-3):
        self.net = net
        self.features = features
        self.grid = grid
        self.var_floor = var_floor

    def _variance_mask(self, v):
        mask = np.zeros(v.shape, dtype=bool)
        if self.features.kind == "gaussian":
            var = np.zeros((v.size - 1) // 5 * 5, dtype=bool).reshape(-1, 5)
            var[:, 3:] = True
            mask[1:] = var.ravel() & (v[1:] < self.var_floor)
        return mask

    def admissible(self, v) -> np.ndarray:
        v = np.array(v, dtype=float)
        v[self._variance_mask(v)] = self.var_floor
        return v

    def _check(self, g):
        g = np.asarray(g, dtype=float)
        if g.shape != self.net.spec.input_dims:
            raise ValueError(f"data bundle has shape {g.shape}, network expects {self.net.spec.input_dims}")
        return g

    def predict_features(self, g) -> np.ndarray:
        return self.net.predict(self._check(g))

    def apply(self, g):
        return self.features.to_field(self.admissible(self.predict_features(g)), self.grid)

    def vjp(self, g, cot):
        g = self._check(g)
        v = self.net.predict(g)
        fc = self.features.field_vjp(self.admissible(v), cot, self.grid)
        fc[self._variance_mask(v)] = 0.0
        return self.net.vjp_input(g, fc)


class _BandLimited(InverseOperator):
    def __init__(self, reference, k0: int, grid: GridSpec):
        if k0 < 0:
            raise ValueError("k0 must be >= 0")
        self.reference = reference
        self.k0 = int(k0)
        self.grid = grid
        self.has_vjp = getattr(reference, "has_vjp", False)
        self._bz, self._bx = vel.cosine_basis(grid, min(self.k0 + 1, grid.cells_per_side))

    def _filter(self, f):
        c = vel.project_fourier(f, self._bz.shape[1], self.grid)
        return vel.eval_fourier(c, self.grid)

    def apply(self, g):
        ref = self.reference.apply(g) if isinstance(self.reference, InverseOperator) else self.reference(g)
        return self._filter(np.asarray(ref, dtype=float))

    def vjp(self, g, cot):
        # the filter is W-self-adjoint only up to quadrature weights; use its exact transpose
        K = self.grid.cells_per_side
        w = np.ones(K + 1)
        w[[0, -1]] = 0.5
        M = self._bz.shape[1]
        norm = np.full(M, K / 2.0)
        norm[0] = K
        # filter(f) = Bz A^T Bx^T with A = (Bx*w)^T f^T (Bz*w) / (n n^T)
        a = (self._bx.T @ np.asarray(cot).T @ self._bz) / np.outer(norm, norm)  # [kx, kz]
        back = (self._bz * w[:, None]) @ a.T @ (self._bx * w[:, None]).T
        return self.reference.vjp(g, back)


def make_band_limited_mock(reference, k0: int, grid: GridSpec) -> InverseOperator:
    """Project the output of ``reference`` onto cosine modes with ``max(kx, kz) <= k0``."""
    return _BandLimited(reference, k0, grid)


def apply_inverse(op: InverseOperator, g) -> np.ndarray:
    return op.apply(g)


def extract_view(data, grid: GridSpec, n_sources: int, side: str = "bottom") -> np.ndarray:
    """Restrict a bundle recorded with ``grid.receiver_side == "both"`` to one side and the first sources."""
    data = np.asarray(data)
    nd = grid.cells_per_side + 1
    if grid.receiver_side == side:
        return data[:n_sources].copy()
    if grid.receiver_side != "both":
        raise ValueError(f"cannot extract {side} receivers from a {grid.receiver_side} record")
    sl = slice(0, nd) if side == "bottom" else slice(nd, 2 * nd)
    return data[:n_sources, :, sl].copy()


# ---------------------------------------------------------------------------
# Neumann series


def clamp_range(grid: GridSpec, velocity_range) -> tuple:
    """``[lo/2, 2 hi]`` capped below the CFL limit of ``grid.dt``."""
    lo, hi = velocity_range
    cfl_cap = min(grid.dx, grid.dz) / (np.sqrt(2.0) * grid.dt)
    return lo / 2.0, min(2.0 * hi, 0.99 * cfl_cap)


@dataclass
class NeumannOpts:
    terms: int = 20
    clamp: tuple | None = None  # (lower, upper) applied before each forward solve

    def __post_init__(self):
        if self.terms < 1:
            raise ValueError("terms must be >= 1")


@dataclass
class NeumannResult:
    m: np.ndarray
    iterates: list
    l2_errors: list = field(default_factory=list)
    linf_errors: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    clamp_events: int = 0


def neumann_reconstruct(op, g, forward, opts: NeumannOpts | int, truth=None, norms=None) -> NeumannResult:
    """Truncated Neumann iteration ``m <- m0 + m - op(forward(m))``, ``m0 = op(g)``.

    Performs ``terms - 1`` updates.  ``iterates[j]`` is the ``(j+1)``-term
    approximation.  With ``truth`` given, ``norms(truth, m) -> (l2, linf)`` is
    recorded per iterate along with cumulative wall-clock seconds.
    """
    if not isinstance(opts, NeumannOpts):
        opts = NeumannOpts(int(opts))
    t0 = time.perf_counter()
    m0 = np.asarray(op.apply(g), dtype=float)
    m = m0.copy()
    res = NeumannResult(m, [m.copy()])

    def record(mj):
        res.seconds.append(time.perf_counter() - t0)
        if truth is not None:
            l2, li = norms(truth, mj)
            res.l2_errors.append(l2)
            res.linf_errors.append(li)

    record(m)
    for j in range(1, opts.terms):
        arg = m
        if opts.clamp is not None:
            arg = np.clip(m, *opts.clamp)
            if np.any(arg != m):
                res.clamp_events += 1
                log.info("Neumann iterate %d clamped to %s", j, opts.clamp)
        try:
            d = forward(arg)
        except (CFLError, InstabilityError, ValueError) as exc:
            raise NeumannInstabilityError(j, exc) from exc
        m = m0 + m - np.asarray(op.apply(d), dtype=float)
        res.iterates.append(m.copy())
        record(m)
    res.m = m
    return res


def neumann_direct_series(op, g, forward, terms: int) -> np.ndarray:
    """``sum_{j < terms} K^j(m0)`` with ``K = I - op o forward``, summed term by term."""
    m0 = np.asarray(op.apply(g), dtype=float)
    term = m0
    total = m0.copy()
    for _ in range(1, terms):
        term = term - np.asarray(op.apply(forward(term)), dtype=float)
        total = total + term
    return total


def abstract_neumann(f, S, g, terms: int, m_true=None) -> dict:
    """Neumann iteration on plain vectors: ``m <- S(g) + m - S(f(m))``.

    Returns ``{"iterates": [...], "errors": [...]}``; errors are Euclidean
    distances to ``m_true`` when given.
    """
    m0 = np.asarray(S(g), dtype=float)
    m = m0.copy()
    its = [m.copy()]
    for _ in range(1, terms):
        m = m0 + m - np.asarray(S(f(m)), dtype=float)
        its.append(m.copy())
    errs = [float(np.linalg.norm(x - m_true)) for x in its] if m_true is not None else []
    return {"iterates": its, "errors": errs}


def stability_ratio(op, forward, m, m_ref) -> float:
    """``||op(f(m)) - op(f(m_ref))|| / ||m - m_ref||`` (monitored, not asserted)."""
    num = np.linalg.norm(op.apply(forward(m)) - op.apply(forward(m_ref)))
    den = np.linalg.norm(np.asarray(m) - np.asarray(m_ref))
    return float(num / den) if den > 0 else float("nan")


# ---------------------------------------------------------------------------
# objectives


def psi_value(m, g, forward: WaveForward) -> float:
    """``0.5 sum_s ||f(m; h_s) - g_s||^2`` with trapezoid weights in time and receiver position."""
    w = forward.grid.record_weights()
    r = forward(m) - np.asarray(g)
    return 0.5 * float(np.sum(w * r * r))


def psi_value_and_gradient(m, g, forward: WaveForward):
    w = forward.grid.record_weights()
    g = np.asarray(g)

    def cot(d):
        r = d - g
        return 0.5 * float(np.sum(w * r * r)), w * r

    val, _, grad = forward.value_and_vjp(m, cot)
    return val, grad


def psi_gradient(m, g, forward: WaveForward) -> np.ndarray:
    return psi_value_and_gradient(m, g, forward)[1]


@dataclass
class Regularizer:
    """``kind`` in {"none", "h1_seminorm", "weighted_feature"} with weight ``gamma``.

    The weighted-feature term is ``0.5 gamma ||F^{-1}(F(m) / mu)||^2`` with
    ``F`` the cosine projection described by ``features``.
    """

    kind: str = "none"
    gamma: float = 0.0
    features: vel.FeatureSpec | None = None

    def __post_init__(self):
        if self.kind not in ("none", "h1_seminorm", "weighted_feature"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.kind == "weighted_feature" and (self.features is None or self.features.kind != "fourier"):
            raise ValueError("weighted_feature needs Fourier features")

    def value_and_gradient(self, m, grid: GridSpec):
        m = np.asarray(m, dtype=float)
        if self.kind == "none" or self.gamma == 0:
            return 0.0, np.zeros_like(m)
        if self.kind == "h1_seminorm":
            return _h1(m, grid, self.gamma)
        return _weighted_feature(m, grid, self.gamma, self.features)


def _h1(m, grid, gamma):
    """Discrete ``0.5 gamma int |grad m|^2`` with trapezoid weights across each edge family."""
    dx, dz = grid.dx, grid.dz
    wz = np.full(m.shape[0], 1.0)
    wz[[0, -1]] = 0.5
    wx = np.full(m.shape[1], 1.0)
    wx[[0, -1]] = 0.5
    ex = np.diff(m, axis=1)  # (nz, nx-1)
    ez = np.diff(m, axis=0)  # (nz-1, nx)
    cx = wz[:, None] * (dz / dx)
    cz = wx[None, :] * (dx / dz)
    val = 0.5 * gamma * (np.sum(cx * ex * ex) + np.sum(cz * ez * ez))
    gx = gamma * cx * ex
    gz = gamma * cz * ez
    grad = np.zeros_like(m)
    grad[:, :-1] -= gx
    grad[:, 1:] += gx
    grad[:-1, :] -= gz
    grad[1:, :] += gz
    return float(val), grad


def _weighted_feature(m, grid, gamma, fs):
    M = fs.modes
    mu = fs.weights(grid).reshape(M, M)
    if np.any(mu == 0):
        raise ValueError("weighted_feature regularizer needs strictly positive mu")
    q = grid.quadrature_weights()
    c = vel.project_fourier(m, M, grid).coeffs / mu
    f = vel.eval_fourier(vel.FourierCoeffs(c), grid)
    val = 0.5 * gamma * float(np.sum(q * f * f))
    # transpose of eval then of project
    bz, bx = vel.cosine_basis(grid, M)
    dc = (bx.T @ (gamma * q * f).T @ bz) / mu
    K = grid.cells_per_side
    w = np.ones(K + 1)
    w[[0, -1]] = 0.5
    norm = np.full(M, K / 2.0)
    norm[0] = K
    a = dc / np.outer(norm, norm)
    grad = (bz * w[:, None]) @ a.T @ (bx * w[:, None]).T
    return val, grad


def phi_value_and_gradient(m, g, op: InverseOperator, forward: WaveForward, reg: Regularizer | None = None, need_grad=True):
    """Preconditioned misfit ``0.5 ||op(f(m)) - op(g)||^2_{L2}`` plus a regularizer."""
    grid = forward.grid
    q = grid.quadrature_weights()
    target = np.asarray(op.apply(g), dtype=float)
    reg = reg or Regularizer()
    rv, rg = reg.value_and_gradient(m, grid)
    if not need_grad:
        r = op.apply(forward(m)) - target
        return 0.5 * float(np.sum(q * r * r)) + rv, None
    if not op.has_vjp:
        raise NotImplementedError("the inverse operator has no VJP; the gradient of Phi needs one")

    def cot(d):
        r = op.apply(d) - target
        return 0.5 * float(np.sum(q * r * r)), op.vjp(d, q * r)

    val, _, grad = forward.value_and_vjp(m, cot)
    return val + rv, grad + rg


def phi_value(m, g, op, forward, reg=None) -> float:
    return phi_value_and_gradient(m, g, op, forward, reg, need_grad=False)[0]


def phi_gradient(m, g, op, forward, reg=None) -> np.ndarray:
    return phi_value_and_gradient(m, g, op, forward, reg)[1]


# ---------------------------------------------------------------------------
# BFGS


@dataclass
class BfgsOpts:
    max_iter: int = 100
    gtol: float = 1e-8
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40
    initial_step: float | None = 1.0  # length of steepest-descent trial steps; None keeps -grad as is
    dense_limit: int = 4000  # switch to L-BFGS above this many unknowns
    memory: int = 10

    def __post_init__(self):
        if self.gtol <= 0 or not 0 < self.c1 < 1 or not 0 < self.shrink < 1 or self.max_iter < 0:
            raise ValueError("invalid BFGS options")


@dataclass
class BfgsResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    status: str  # "converged", "max_iter" or "line_search_failed"
    trace: list


def _safe_eval(fun, x):
    try:
        f, g = fun(x)
    except (CFLError, InstabilityError, ValueError, FloatingPointError):
        return np.inf, None
    if not np.isfinite(f):
        return np.inf, None
    return f, g


def bfgs_minimize(fun, x0, opts: BfgsOpts | None = None, callback=None) -> BfgsResult:
    """Quasi-Newton minimization with Armijo backtracking.

    ``fun(x) -> (value, gradient)`` acts on arrays of any shape.  Trial points
    where ``fun`` raises a solver error are treated as infinite, so the line
    search backs off from inadmissible velocities.  The objective trace is
    non-increasing.
    """
    opts = opts or BfgsOpts()
    shape = np.shape(x0)
    x = np.asarray(x0, dtype=float).ravel().copy()
    n = x.size
    wrap = lambda v: fun(v.reshape(shape))
    f, g = wrap(x)
    g = np.asarray(g, dtype=float).ravel()
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    dense = n <= opts.dense_limit
    H = None
    mem = []
    trace = [float(f)]
    status = "max_iter"
    it = 0
    for it in range(1, opts.max_iter + 1):
        gn = float(np.linalg.norm(g))
        if gn <= opts.gtol:
            status = "converged"
            it -= 1
            break
        while True:
            p = _direction(g, gn, H if dense else None, mem, opts)
            slope = float(g @ p)
            if slope >= 0:  # not a descent direction: reset curvature
                H = None
                mem.clear()
                p = _direction(g, gn, None, mem, opts)
                slope = float(g @ p)
            alpha, f_new, g_new = _backtrack(wrap, x, f, p, slope, opts)
            if alpha is not None or (H is None and not mem):
                break
            # the curvature model gave a useless direction: drop it and retry along -grad
            H = None
            mem.clear()
        if alpha is None:
            status = "line_search_failed"
            warnings.warn("BFGS line search failed; returning the best iterate", RuntimeWarning)
            it -= 1
            break
        x_new = x + alpha * p
        g_new = np.asarray(g_new, dtype=float).ravel()
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if dense:
                if H is None:
                    H = np.eye(n) * (sy / float(y @ y))
                rho = 1.0 / sy
                Hy = H @ y
                H += (rho * rho * float(y @ Hy) + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
            else:
                mem.append((s, y, 1.0 / sy))
                if len(mem) > opts.memory:
                    mem.pop(0)
        else:  # negative curvature: the stored model is stale, restart from steepest descent
            H = None
            mem.clear()
        x, f, g = x_new, f_new, g_new
        trace.append(float(f))
        if callback is not None:
            callback(it, x.reshape(shape), f)
    return BfgsResult(x.reshape(shape), float(f), float(np.linalg.norm(g)), it, status, trace)


def _direction(g, gn, H, mem, opts):
    if H is not None:
        return -(H @ g)
    if mem:
        return -_two_loop(g, mem)
    p = -g
    if opts.initial_step is not None:
        # no curvature model yet: -grad carries the objective's units, so fix the trial length instead
        p = p * (opts.initial_step / gn)
    return p


def _backtrack(wrap, x, f, p, slope, opts):
    """Armijo backtracking; returns ``(alpha, f, g)`` or ``(None, inf, None)``."""
    alpha = 1.0
    for _ in range(opts.max_backtracks):
        f_new, g_new = _safe_eval(wrap, x + alpha * p)
        if f_new <= f + opts.c1 * alpha * slope:
            return alpha, f_new, g_new
        alpha *= opts.shrink
    return None, np.inf, None


def _two_loop(g, mem):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if mem:
        s, y, _ = mem[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


# ---------------------------------------------------------------------------
# hybrid pipeline


@dataclass
class HybridResult:
    warm_start: np.ndarray
    m: np.ndarray
    psi_warm: float
    psi_final: float
    neumann: NeumannResult
    bfgs: BfgsResult


def hybrid_reconstruct(op, g_full, terms, bfgs_opts: BfgsOpts, forward_full: WaveForward, forward_net, n_net_sources=3, clamp=None) -> HybridResult:
    """Neumann warm start from the network view of ``g_full``, then BFGS on Psi.

    ``forward_full`` produces the extended bundle (all sources, both
    receiver sides); ``forward_net`` produces the bundle the inverse was
    trained on.  The warm start is the Neumann output clamped into
    ``clamp``; the unclamped iterates stay available in ``.neumann``.
    """
    g_net = extract_view(g_full, forward_full.grid, n_net_sources, "bottom")
    nres = neumann_reconstruct(op, g_net, forward_net, NeumannOpts(terms, clamp))
    warm = nres.m if clamp is None else np.clip(nres.m, *clamp)
    fun = lambda m: psi_value_and_gradient(m, g_full, forward_full)
    psi_warm = fun(warm)[0]
    res = bfgs_minimize(fun, warm, bfgs_opts)
    return HybridResult(warm, res.x, psi_warm, res.f, nres, res)
