"""Velocity-model parameterizations, sampling laws, rescaling and spectral projection.

Two parametric families are supported, a truncated cosine series in the
Laplace-Neumann eigenfunctions of the box and a Gaussian bump mixture, plus
raw mesh fields.  Mesh fields follow the ``[iz, ix]`` layout of
:class:`coupledfwi.wave.GridSpec`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .wave import GridSpec

__all__ = [
    "FourierCoeffs",
    "GaussianComponent",
    "GaussianMixture",
    "FeatureSpec",
    "DegenerateRangeError",
    "cosine_basis",
    "eval_fourier",
    "eval_gaussian",
    "sample_fourier",
    "sample_gaussian",
    "rescale",
    "project_fourier",
    "default_mu",
]


class DegenerateRangeError(ValueError):
    """Rescaling a constant field is undefined."""


@dataclass
class FourierCoeffs:
    """Coefficients ``coeffs[kx, kz]`` of ``cos(kx pi x / L) cos(kz pi z / H)``."""

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != self.coeffs.shape[1] or self.coeffs.shape[0] < 1:
            raise ValueError("coefficients must be a nonempty square matrix")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("coefficients must be finite")

    @property
    def modes(self) -> int:
        return self.coeffs.shape[0]


@dataclass
class GaussianComponent:
    amplitude: float
    center: tuple  # (x0, z0)
    cov: np.ndarray  # 2x2, ordered (x, z)

    def __post_init__(self):
        self.cov = np.asarray(self.cov, dtype=float).reshape(2, 2)
        self.center = (float(self.center[0]), float(self.center[1]))


@dataclass
class GaussianMixture:
    """``m0 + sum_k c_k exp(-(p - p_k)^T Sigma_k^{-1} (p - p_k) / 2)``."""

    background: float = 10.0
    components: list = field(default_factory=list)

    # feature layout: [m0, (c, x0, z0, Sxx, Szz) per component]
    def to_features(self) -> np.ndarray:
        out = [self.background]
        for comp in self.components:
            out += [comp.amplitude, comp.center[0], comp.center[1], comp.cov[0, 0], comp.cov[1, 1]]
        return np.array(out)

    @classmethod
    def from_features(cls, v) -> "GaussianMixture":
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or (v.size - 1) % 5:
            raise ValueError("mixture feature vector must have length 1 + 5 M")
        comps = [
            GaussianComponent(r[0], (r[1], r[2]), np.diag([r[3], r[4]]))
            for r in v[1:].reshape(-1, 5)
        ]
        return cls(float(v[0]), comps)

    @staticmethod
    def isotropic(background, amplitude, center, sigma) -> "GaussianMixture":
        """Single bump with covariance ``sigma^2 I``."""
        return GaussianMixture(background, [GaussianComponent(amplitude, center, sigma**2 * np.eye(2))])


@dataclass
class FeatureSpec:
    """Feature map description: ``kind`` in {"fourier", "gaussian", "mesh"}.

    ``modes`` is M (cosine modes per axis, or number of mixture components);
    ``mu`` weights each feature coordinate in the training loss.
    """

    kind: str
    modes: int = 5
    mu: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("fourier", "gaussian", "mesh"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.modes < 1:
            raise ValueError("modes must be >= 1")
        if self.mu is not None:
            self.mu = np.asarray(self.mu, dtype=float)
            if np.any(self.mu < 0) or not np.all(np.isfinite(self.mu)):
                raise ValueError("mu must be finite and nonnegative")

    def dim(self, grid: GridSpec | None = None) -> int:
        if self.kind == "fourier":
            return self.modes**2
        if self.kind == "gaussian":
            return 1 + 5 * self.modes
        if grid is None:
            raise ValueError("mesh features need a grid")
        return (grid.cells_per_side + 1) ** 2

    def weights(self, grid: GridSpec | None = None) -> np.ndarray:
        if self.mu is not None:
            if self.mu.size != self.dim(grid):
                raise ValueError("mu has the wrong length for this feature space")
            return self.mu
        if self.kind == "fourier":
            return default_mu(self.modes)
        return np.ones(self.dim(grid))

    def to_field(self, v, grid: GridSpec) -> np.ndarray:
        """Inverse feature map: feature vector to mesh field."""
        v = np.asarray(v, dtype=float)
        if self.kind == "fourier":
            return eval_fourier(FourierCoeffs(v.reshape(self.modes, self.modes)), grid)
        if self.kind == "gaussian":
            return eval_gaussian(GaussianMixture.from_features(v), grid)
        return v.reshape(grid.shape).copy()

    def field_vjp(self, v, cot, grid: GridSpec) -> np.ndarray:
        """Transpose of the derivative of :meth:`to_field` applied to a mesh cotangent."""
        if self.kind == "fourier":
            bz, bx = cosine_basis(grid, self.modes)
            # field = Bz C^T Bx^T  ->  dC = Bx^T cot^T Bz
            return (bx.T @ np.asarray(cot).T @ bz).ravel()
        if self.kind == "mesh":
            return np.asarray(cot, dtype=float).ravel().copy()
        return _gaussian_vjp(np.asarray(v, dtype=float), np.asarray(cot, dtype=float), grid)

    def from_field(self, m, grid: GridSpec) -> np.ndarray:
        """Feature map for the linear kinds (projection for Fourier)."""
        if self.kind == "fourier":
            return project_fourier(m, self.modes, grid).coeffs.ravel()
        if self.kind == "mesh":
            return np.asarray(m, dtype=float).ravel().copy()
        raise ValueError("the Gaussian feature map has no projection; keep the generating parameters")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "modes": self.modes, "mu": None if self.mu is None else self.mu.tolist()}

    @classmethod
    def from_dict(cls, d) -> "FeatureSpec":
        return cls(d["kind"], d.get("modes", 5), d.get("mu"))


def default_mu(modes: int) -> np.ndarray:
    """``[(kx+1)(kz+1)]^(-1/2)`` flattened in ``[kx, kz]`` order; its maximum is 1."""
    k = np.arange(modes) + 1.0
    return (1.0 / np.sqrt(np.outer(k, k))).ravel()


def cosine_basis(grid: GridSpec, modes: int):
    """Return ``(Bz, Bx)`` with ``Bz[iz, k] = cos(k pi z / H)`` and ``Bx[ix, k] = cos(k pi x / L)``."""
    k = np.arange(modes)
    bx = np.cos(np.pi * np.outer(grid.x, k) / grid.length_x)
    bz = np.cos(np.pi * np.outer(grid.z, k) / grid.depth_z)
    return bz, bx


def eval_fourier(c: FourierCoeffs, grid: GridSpec) -> np.ndarray:
    """Sum ``c[kx, kz] cos(kx pi x) cos(kz pi z)`` on the mesh nodes."""
    bz, bx = cosine_basis(grid, c.modes)
    return bz @ c.coeffs.T @ bx.T


def project_fourier(f, modes: int, grid: GridSpec) -> FourierCoeffs:
    """Trapezoid-weighted cosine projection onto the first ``modes`` modes per axis.

    On the nodal grid this is a DCT-I; it inverts :func:`eval_fourier`
    exactly whenever ``modes <= K``.

    Raises
    ------
    ValueError
        If ``modes > K`` or the field does not match the grid.
    """
    K = grid.cells_per_side
    if modes > K:
        raise ValueError(f"cannot project onto {modes} modes on a grid with K={K}")
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape:
        raise ValueError("field shape does not match the grid")
    bz, bx = cosine_basis(grid, modes)
    w = np.ones(K + 1)
    w[[0, -1]] = 0.5
    # discrete norms of the basis vectors: K for k = 0, K/2 otherwise
    norm = np.full(modes, K / 2.0)
    norm[0] = K
    proj = (bx * w[:, None]).T @ f.T @ (bz * w[:, None])  # [kx, kz]
    return FourierCoeffs(proj / np.outer(norm, norm))


def eval_gaussian(gm: GaussianMixture, grid: GridSpec) -> np.ndarray:
    """Evaluate a Gaussian mixture on the mesh nodes.

    Raises
    ------
    ValueError
        If a covariance is singular or not positive definite.
    """
    x, z = np.meshgrid(grid.x, grid.z)
    out = np.full(grid.shape, float(gm.background))
    for comp in gm.components:
        out += comp.amplitude * _bump(comp, x, z)
    return out


def _precision(cov):
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, cov.T):
        raise ValueError("covariance must be symmetric")
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("covariance must be positive definite")
    return np.linalg.inv(cov)


def _bump(comp, x, z):
    p = _precision(comp.cov)
    dx = x - comp.center[0]
    dz = z - comp.center[1]
    q = p[0, 0] * dx * dx + 2 * p[0, 1] * dx * dz + p[1, 1] * dz * dz
    return np.exp(-0.5 * q)


def _gaussian_vjp(v, cot, grid):
    gm = GaussianMixture.from_features(v)
    x, z = np.meshgrid(grid.x, grid.z)
    out = np.zeros_like(v)
    out[0] = cot.sum()
    for i, comp in enumerate(gm.components):
        sx, sz = comp.cov[0, 0], comp.cov[1, 1]
        if sx <= 0 or sz <= 0:
            raise ValueError("covariance must be positive definite")
        dx = x - comp.center[0]
        dz = z - comp.center[1]
        e = np.exp(-0.5 * (dx * dx / sx + dz * dz / sz))
        ce = cot * e
        c = comp.amplitude
        out[1 + 5 * i : 6 + 5 * i] = [
            ce.sum(),
            c * np.sum(ce * dx / sx),
            c * np.sum(ce * dz / sz),
            c * np.sum(ce * dx * dx) / (2 * sx * sx),
            c * np.sum(ce * dz * dz) / (2 * sz * sz),
        ]
    return out


def sample_fourier(modes: int, alpha: float, rng: np.random.Generator) -> FourierCoeffs:
    """Uniform[-0.5, 0.5] coefficients damped by ``[(kx+1)(kz+1)]^(-alpha)``."""
    if modes < 1 or alpha < 0:
        raise ValueError("need modes >= 1 and alpha >= 0")
    raw = rng.uniform(-0.5, 0.5, size=(modes, modes))
    k = np.arange(modes) + 1.0
    return FourierCoeffs(raw * np.outer(k, k) ** (-alpha))


def sample_gaussian(
    components: int, rng: np.random.Generator, length_x: float = 1.0, depth_z: float = 1.0
) -> GaussianMixture:
    """Amplitudes in U[0, 5], centres uniform in the box, diagonal covariances in U[0, 0.2] + 0.1."""
    if components < 1:
        raise ValueError("need at least one component")
    comps = []
    for _ in range(components):
        c = rng.uniform(0.0, 5.0)
        x0 = rng.uniform(0.0, length_x)
        z0 = rng.uniform(-depth_z, 0.0)
        d = rng.uniform(0.0, 0.2, size=2) + 0.1
        comps.append(GaussianComponent(c, (x0, z0), np.diag(d)))
    return GaussianMixture(10.0, comps)


def rescale(f, lo: float, hi: float) -> np.ndarray:
    """Affine map sending ``min f`` to ``lo`` and ``max f`` to ``hi``.

    Raises
    ------
    DegenerateRangeError
        If ``f`` is constant.
    """
    if not hi > lo:
        raise ValueError("need hi > lo")
    f = np.asarray(f, dtype=float)
    fmin, fmax = f.min(), f.max()
    if not fmax > fmin:
        raise DegenerateRangeError("cannot rescale a constant field")
    out = lo + (hi - lo) * (f - fmin) / (fmax - fmin)
    # pin the extremes exactly
    out[f == fmin] = lo
    out[f == fmax] = hi
    return out


def rescale_affine(f, lo: float, hi: float) -> tuple:
    """The ``(scale, shift)`` pair used by :func:`rescale`."""
    f = np.asarray(f, dtype=float)
    fmin, fmax = f.min(), f.max()
    if not fmax > fmin:
        raise DegenerateRangeError("cannot rescale a constant field")
    s = (hi - lo) / (fmax - fmin)
    return s, lo - s * fmin
