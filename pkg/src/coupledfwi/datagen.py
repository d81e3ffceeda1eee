"""Synthetic datasets of (shot records, velocity features) pairs.

A dataset is a directory holding ``manifest.json`` plus two raw tensors,
``signals.bin`` with shape ``(N, Ns, Nt_rec, Nd)`` and ``targets.bin`` with
shape ``(N, F)``, both little-endian float64 in row-major order.  Single
tensors (signals, mesh fields, reconstructions) use the same raw layout with a
``.json`` sidecar next to the ``.bin`` file.

Every sample draws from its own random stream, derived from the dataset seed
and the sample index, so results do not depend on the number of workers.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import json
import os
from pathlib import Path

import numpy as np

from . import velocity as vel
from .wave import TRAINING_SOURCE_CENTERS, GridSpec, WaveForward, dipole_source

__all__ = [
    "NoiseSpec",
    "DataConfig",
    "Dataset",
    "CorruptDatasetError",
    "UnsupportedVersionError",
    "add_noise",
    "split",
    "synthesize",
    "sample_velocity",
    "write_dataset",
    "read_dataset",
    "write_tensor",
    "read_tensor",
]

FORMAT = "coupledfwi-dataset"
VERSION = 1
DTYPE = "<f8"


class CorruptDatasetError(ValueError):
    pass


class UnsupportedVersionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """``kind`` is "none", "multiplicative" (per entry) or "additive" (relative to the bundle rms)."""

    kind: str = "none"
    level: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "multiplicative", "additive"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.level < 0:
            raise ValueError("noise level must be nonnegative")


def add_noise(data, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Return a noisy copy of ``data``.

    multiplicative: ``g (1 + level xi)``; additive: ``g + level rms(g) xi``,
    with ``xi`` i.i.d. standard normal per entry.
    """
    g = np.array(data, dtype=float)
    if spec.kind == "none" or spec.level == 0:
        return g
    xi = rng.standard_normal(g.shape)
    if spec.kind == "multiplicative":
        return g * (1.0 + spec.level * xi)
    rms = np.sqrt(np.mean(g**2)) if g.size else 0.0
    return g + spec.level * rms * xi


def split(n: int, train_fraction: float, rng: np.random.Generator) -> tuple:
    """Disjoint shuffled ``(train_idx, test_idx)`` covering ``range(n)``."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    perm = rng.permutation(n)
    k = int(round(train_fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


@dataclass
class DataConfig:
    """Everything that determines a synthetic dataset."""

    grid: GridSpec
    sources: tuple = TRAINING_SOURCE_CENTERS
    features: vel.FeatureSpec = None
    alpha: float = 0.0
    enrich_modes: int = 0
    velocity_range: tuple = (7.0, 15.0)
    n_samples: int = 0
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0

    def __post_init__(self):
        if self.features is None:
            self.features = vel.FeatureSpec("fourier", 5)
        if self.features.kind == "mesh":
            raise ValueError("datasets are generated from parametric models (fourier or gaussian)")
        if self.enrich_modes and self.features.kind != "fourier":
            raise ValueError("out-of-band enrichment is defined for Fourier features only")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        lo, hi = self.velocity_range
        if not 0 < lo < hi:
            raise ValueError("velocity range must satisfy 0 < lo < hi")
        self.sources = tuple(tuple(float(v) for v in s) for s in self.sources)

    def forward(self) -> WaveForward:
        return WaveForward(self.grid, [dipole_source(self.grid, a, b) for a, b in self.sources])

    @property
    def signal_shape(self) -> tuple:
        return (len(self.sources), self.grid.n_records, self.grid.n_receivers)

    @property
    def feature_dim(self) -> int:
        return self.features.dim(self.grid)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "sources": [list(s) for s in self.sources],
            "features": self.features.to_dict(),
            "alpha": self.alpha,
            "enrich_modes": self.enrich_modes,
            "velocity_range": list(self.velocity_range),
            "n_samples": self.n_samples,
            "noise": {"kind": self.noise.kind, "level": self.noise.level},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(
            grid=GridSpec.from_dict(d["grid"]),
            sources=tuple(tuple(s) for s in d["sources"]),
            features=vel.FeatureSpec.from_dict(d["features"]),
            alpha=d.get("alpha", 0.0),
            enrich_modes=d.get("enrich_modes", 0),
            velocity_range=tuple(d.get("velocity_range", (7.0, 15.0))),
            n_samples=d.get("n_samples", 0),
            noise=NoiseSpec(**d.get("noise", {})),
            seed=d.get("seed", 0),
        )


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index, stream)))


def sample_velocity(cfg: DataConfig, index: int) -> tuple:
    """Draw sample ``index``: returns ``(mesh_field, target_features)``.

    The field is rescaled to ``cfg.velocity_range``; the target is the
    in-band feature vector of the rescaled field.
    """
    rng = sample_rng(cfg.seed, index)
    grid = cfg.grid
    lo, hi = cfg.velocity_range
    fs = cfg.features
    if fs.kind == "fourier":
        total = fs.modes + cfg.enrich_modes
        # with enrichment the modes outside the M x M block form the out-of-band term
        c = vel.sample_fourier(total, cfg.alpha, rng).coeffs
        f = vel.eval_fourier(vel.FourierCoeffs(c), grid)
        m = vel.rescale(f, lo, hi)
        target = vel.project_fourier(m, fs.modes, grid).coeffs.ravel()
        return m, target
    gm = vel.sample_gaussian(fs.modes, rng, grid.length_x, grid.depth_z)
    f = vel.eval_gaussian(gm, grid)
    s, b = vel.rescale_affine(f, lo, hi)
    gm.background = s * gm.background + b
    for comp in gm.components:
        comp.amplitude *= s
    m = vel.eval_gaussian(gm, grid)
    return m, gm.to_features()


def _generate(cfg_dict: dict, indices, signals_path, targets_path):
    cfg = DataConfig.from_dict(cfg_dict)
    fwd = cfg.forward()
    n = cfg.n_samples
    sig = np.memmap(signals_path, dtype=DTYPE, mode="r+", shape=(n,) + cfg.signal_shape)
    tgt = np.memmap(targets_path, dtype=DTYPE, mode="r+", shape=(n, cfg.feature_dim))
    for i in indices:
        m, target = sample_velocity(cfg, i)
        data = fwd(m)
        if cfg.noise.kind != "none":
            data = add_noise(data, cfg.noise, sample_rng(cfg.seed, i, 1))
        sig[i] = data
        tgt[i] = target
    sig.flush()
    tgt.flush()
    del sig, tgt
    return len(indices)


def manifest_for(cfg: DataConfig) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "f64le",
        "config": cfg.to_dict(),
        "tensors": {
            "signals": {"file": "signals.bin", "shape": [cfg.n_samples, *cfg.signal_shape]},
            "targets": {"file": "targets.bin", "shape": [cfg.n_samples, cfg.feature_dim]},
        },
    }


def synthesize(cfg: DataConfig, out, workers: int = 1, chunk: int = 64) -> "Dataset":
    """Generate a dataset into directory ``out`` and return it opened read-only.

    Samples are written at fixed offsets, so the bytes are independent of
    ``workers``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    man = manifest_for(cfg)
    sig_path = out / "signals.bin"
    tgt_path = out / "targets.bin"
    n = cfg.n_samples
    for p, shape in ((sig_path, man["tensors"]["signals"]["shape"]), (tgt_path, man["tensors"]["targets"]["shape"])):
        with open(p, "wb") as fh:
            fh.truncate(8 * int(np.prod(shape)))
    if n:
        blocks = [range(s, min(s + chunk, n)) for s in range(0, n, chunk)]
        cfg_dict = cfg.to_dict()
        if workers <= 1:
            for b in blocks:
                _generate(cfg_dict, b, sig_path, tgt_path)
        else:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                list(ex.map(_generate, [cfg_dict] * len(blocks), blocks, [sig_path] * len(blocks), [tgt_path] * len(blocks)))
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2)
    return read_dataset(out)


class Dataset:
    """Read-only view of a dataset directory (tensors are memory-mapped)."""

    def __init__(self, path, manifest, signals, targets):
        self.path = Path(path)
        self.manifest = manifest
        self.signals = signals
        self.targets = targets
        self.config = DataConfig.from_dict(manifest["config"])

    def __len__(self):
        return self.signals.shape[0]

    def velocity(self, index: int) -> np.ndarray:
        """Regenerate the velocity field of sample ``index`` from the seed."""
        return sample_velocity(self.config, int(index))[0]


def write_dataset(path, cfg: DataConfig, signals, targets) -> Dataset:
    """Persist in-memory tensors in the dataset layout."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    signals = np.ascontiguousarray(signals, dtype=DTYPE)
    targets = np.ascontiguousarray(targets, dtype=DTYPE)
    man = manifest_for(cfg)
    if list(signals.shape) != man["tensors"]["signals"]["shape"] or list(targets.shape) != man["tensors"]["targets"]["shape"]:
        raise ValueError("tensor shapes do not match the configuration")
    signals.tofile(path / "signals.bin")
    targets.tofile(path / "targets.bin")
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2)
    return read_dataset(path)


def _open_raw(path, shape):
    expected = 8 * int(np.prod(shape))
    try:
        size = os.path.getsize(path)
    except OSError as exc:
        raise CorruptDatasetError(f"missing tensor file {path}") from exc
    if size != expected:
        raise CorruptDatasetError(f"{Path(path).name}: {size} bytes, manifest implies {expected}")
    if expected == 0:
        return np.zeros(shape, dtype=DTYPE)
    return np.memmap(path, dtype=DTYPE, mode="r", shape=tuple(shape))


def read_dataset(path, check_samples: int = 16) -> Dataset:
    """Open and validate a dataset directory.

    Raises
    ------
    UnsupportedVersionError
        Unknown format tag or version.
    CorruptDatasetError
        Byte counts that disagree with the manifest, or non-finite values in
        the spot-checked samples.
    """
    path = Path(path)
    try:
        with open(path / "manifest.json", encoding="utf-8") as fh:
            man = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptDatasetError(f"unreadable manifest in {path}") from exc
    if man.get("format") != FORMAT or man.get("version") != VERSION or man.get("dtype") != "f64le":
        raise UnsupportedVersionError(f"unsupported dataset format {man.get('format')!r} v{man.get('version')}")
    try:
        cfg = DataConfig.from_dict(man["config"])
        t = man["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptDatasetError(f"malformed manifest: {exc}") from exc
    want_sig = [cfg.n_samples, *cfg.signal_shape]
    want_tgt = [cfg.n_samples, cfg.feature_dim]
    if t["signals"]["shape"] != want_sig or t["targets"]["shape"] != want_tgt:
        raise CorruptDatasetError("tensor shapes in manifest disagree with its configuration")
    sig = _open_raw(path / t["signals"]["file"], want_sig)
    tgt = _open_raw(path / t["targets"]["file"], want_tgt)
    n = cfg.n_samples
    if n:
        picks = np.unique(np.linspace(0, n - 1, min(n, check_samples)).astype(int))
        if not (np.all(np.isfinite(sig[picks])) and np.all(np.isfinite(tgt[picks]))):
            raise CorruptDatasetError("non-finite values in dataset")
    return Dataset(path, man, sig, tgt)


def write_tensor(path, array, **meta) -> Path:
    """Write ``array`` as raw f64le to ``path`` (a ``.bin`` file) plus a ``.json`` sidecar."""
    path = Path(path)
    if path.suffix != ".bin":
        path = path.with_suffix(".bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.ascontiguousarray(array, dtype=DTYPE)
    a.tofile(path)
    side = {"dtype": "f64le", "shape": list(a.shape), **meta}
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2)
    return path


def read_tensor(path) -> tuple:
    """Return ``(array, sidecar_dict)`` for a tensor written by :func:`write_tensor`."""
    path = Path(path)
    if path.suffix != ".bin":
        path = path.with_suffix(".bin")
    try:
        with open(path.with_suffix(".json"), encoding="utf-8") as fh:
            side = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptDatasetError(f"unreadable sidecar for {path}") from exc
    if side.get("dtype") != "f64le":
        raise UnsupportedVersionError(f"unsupported tensor dtype {side.get('dtype')!r}")
    shape = side["shape"]
    arr = np.array(_open_raw(path, shape))
    return arr, side
