"""Dense residual encoder/decoder/predictor with hand-written reverse mode.

The network maps a flattened data bundle ``g`` to two outputs that share the
encoder: a reconstruction ``D(E(g))`` of the input and a feature prediction
``P(E(g))``.  Each path is

    affine -> n residual blocks -> affine

with blocks ``h + W2 act(W1 h + b1) + b2`` and a leaky rectifier.  Inputs and
feature outputs pass through fixed affine normalizations that are estimated
once from the training set and stored with the checkpoint, so the network
acts on raw data and raw features.

All parameters live in one flat float64 vector; :class:`Layout` maps tensor
names to slices.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import json
import math
from pathlib import Path
import time

import numpy as np

__all__ = [
    "NetworkSpec",
    "TrainConfig",
    "Layout",
    "Network",
    "IncompatibleCheckpointError",
    "TrainingDivergedError",
    "init_params",
    "forward",
    "loss_weighted",
    "grad_params",
    "vjp_input",
    "learning_rate",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

SLOPE = 0.01


class IncompatibleCheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture descriptor.

    ``input_dims`` is ``(Ns, Nt_rec, Nd)``; the network sees the flattened
    bundle of length ``Ns * Nt_rec * Nd``.
    """

    input_dims: tuple
    output_dim: int
    latent_dim: int = 256
    width: int = 128
    n_encoder: int = 10
    n_decoder: int = 5
    n_predictor: int = 10
    activation: str = "leaky_relu"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        dims = (*self.input_dims, self.output_dim, self.latent_dim, self.width)
        if any(d < 1 for d in dims) or min(self.n_encoder, self.n_decoder, self.n_predictor) < 0:
            raise ValueError("all network dimensions must be >= 1")
        if self.activation != "leaky_relu":
            raise ValueError("only the leaky_relu activation is implemented")

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_dims))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        return cls(**d)


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    decay: float = 1.2
    decay_every: int = 5
    batch_size: int = 128
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need lr0 > 0, batch_size >= 1, epochs >= 0")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """``lr0 / decay ** floor(epoch / decay_every)``."""
    return cfg.lr0 / cfg.decay ** (epoch // cfg.decay_every)


class Layout:
    """Ordered ``name -> (offset, shape)`` table for the flat parameter vector."""

    def __init__(self, entries):
        self.entries = []
        off = 0
        for name, shape in entries:
            shape = tuple(int(s) for s in shape)
            self.entries.append((name, off, shape))
            off += int(np.prod(shape))
        self.size = off
        self._index = {n: (o, s) for n, o, s in self.entries}

    def view(self, theta, name):
        off, shape = self._index[name]
        return theta[off : off + int(np.prod(shape))].reshape(shape)

    def to_list(self):
        return [[n, o, list(s)] for n, o, s in self.entries]


def _path_layers(spec: NetworkSpec):
    """Per path, a list of ``("dense", prefix, fan_in, fan_out)`` or ``("block", prefix, width)``."""
    w = spec.width
    paths = {}
    for name, d_in, n_blocks, d_out in (
        ("enc", spec.input_dim, spec.n_encoder, spec.latent_dim),
        ("dec", spec.latent_dim, spec.n_decoder, spec.input_dim),
        ("pred", spec.latent_dim, spec.n_predictor, spec.output_dim),
    ):
        layers = [("dense", f"{name}.in", d_in, w)]
        layers += [("block", f"{name}.b{i}", w) for i in range(n_blocks)]
        layers.append(("dense", f"{name}.out", w, d_out))
        paths[name] = layers
    return paths


def make_layout(spec: NetworkSpec) -> Layout:
    entries = []
    for layers in _path_layers(spec).values():
        for lay in layers:
            if lay[0] == "dense":
                _, p, a, b = lay
                entries += [(f"{p}.W", (a, b)), (f"{p}.b", (b,))]
            else:
                _, p, w = lay
                entries += [(f"{p}.W1", (w, w)), (f"{p}.b1", (w,)), (f"{p}.W2", (w, w)), (f"{p}.b2", (w,))]
    return Layout(entries)


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """He-scaled Gaussian weights and zero biases.

    Affine layers and the first layer of every residual branch use variance
    ``2 / fan_in``.  The second layer of a branch is further divided by the
    number of blocks in its path so that the residual stack starts close to
    the identity.
    """
    layout = make_layout(spec)
    theta = np.zeros(layout.size)
    for path, layers in _path_layers(spec).items():
        n_blocks = max(1, sum(1 for lay in layers if lay[0] == "block"))
        for lay in layers:
            if lay[0] == "dense":
                _, p, a, b = lay
                layout.view(theta, f"{p}.W")[...] = rng.standard_normal((a, b)) * math.sqrt(2.0 / a)
            else:
                _, p, w = lay
                layout.view(theta, f"{p}.W1")[...] = rng.standard_normal((w, w)) * math.sqrt(2.0 / w)
                layout.view(theta, f"{p}.W2")[...] = rng.standard_normal((w, w)) * math.sqrt(2.0 / (w * n_blocks))
    return theta


@dataclass
class Normalization:
    """Fixed affine maps: ``x = (g - in_mean) / in_scale`` and ``m = out_mean + out_std * y``."""

    in_mean: np.ndarray
    in_scale: float
    out_mean: np.ndarray
    out_std: np.ndarray

    @classmethod
    def identity(cls, spec: NetworkSpec) -> "Normalization":
        return cls(np.zeros(spec.input_dim), 1.0, np.zeros(spec.output_dim), np.ones(spec.output_dim))

    @classmethod
    def fit(cls, signals, targets, chunk: int = 2048) -> "Normalization":
        """Per-entry input mean with one global input scale; per-feature output mean and std."""
        n = signals.shape[0]
        x = signals.reshape(n, -1)
        s1 = np.zeros(x.shape[1])
        for i in range(0, n, chunk):
            s1 += x[i : i + chunk].sum(axis=0)
        mean = s1 / n
        ss = 0.0
        for i in range(0, n, chunk):
            ss += float(np.sum((x[i : i + chunk] - mean) ** 2))
        scale = math.sqrt(ss / x.size) or 1.0
        t = np.asarray(targets)
        out_std = t.std(axis=0)
        out_std[out_std == 0] = 1.0
        return cls(mean, scale, t.mean(axis=0), out_std)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.in_mean, [self.in_scale], self.out_mean, self.out_std])

    @classmethod
    def from_vector(cls, v, spec: NetworkSpec) -> "Normalization":
        a, f = spec.input_dim, spec.output_dim
        if v.size != a + 1 + 2 * f:
            raise IncompatibleCheckpointError("normalization vector has the wrong length")
        return cls(v[:a].copy(), float(v[a]), v[a + 1 : a + 1 + f].copy(), v[a + 1 + f :].copy())


class Network:
    """Parameters, layout and normalization bundled for evaluation."""

    def __init__(self, spec: NetworkSpec, theta=None, norm: Normalization | None = None, rng=None):
        self.spec = spec
        self.layout = make_layout(spec)
        if theta is None:
            theta = init_params(spec, rng if rng is not None else np.random.default_rng(0))
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.layout.size,):
            raise IncompatibleCheckpointError(f"parameter vector has {theta.size} entries, layout needs {self.layout.size}")
        self.theta = theta
        self.norm = norm if norm is not None else Normalization.identity(spec)
        self._paths = _path_layers(spec)

    # -- evaluation with caches -------------------------------------------

    def _run(self, path, x, theta, caches):
        lay = self.layout
        for layer in self._paths[path]:
            if layer[0] == "dense":
                p = layer[1]
                caches.append(x)
                x = x @ lay.view(theta, f"{p}.W") + lay.view(theta, f"{p}.b")
            else:
                p = layer[1]
                a = x @ lay.view(theta, f"{p}.W1") + lay.view(theta, f"{p}.b1")
                s = np.where(a > 0, a, SLOPE * a)
                caches.append((x, a, s))
                x = x + s @ lay.view(theta, f"{p}.W2") + lay.view(theta, f"{p}.b2")
        return x

    def _back(self, path, dy, theta, caches, grad):
        lay = self.layout
        for layer, cache in zip(reversed(self._paths[path]), reversed(caches)):
            p = layer[1]
            if layer[0] == "dense":
                x = cache
                W = lay.view(theta, f"{p}.W")
                if grad is not None:
                    lay.view(grad, f"{p}.W")[...] += x.T @ dy
                    lay.view(grad, f"{p}.b")[...] += dy.sum(axis=0)
                dy = dy @ W.T
            else:
                x, a, s = cache
                W1 = lay.view(theta, f"{p}.W1")
                W2 = lay.view(theta, f"{p}.W2")
                if grad is not None:
                    lay.view(grad, f"{p}.W2")[...] += s.T @ dy
                    lay.view(grad, f"{p}.b2")[...] += dy.sum(axis=0)
                da = (dy @ W2.T) * np.where(a > 0, 1.0, SLOPE)
                if grad is not None:
                    lay.view(grad, f"{p}.W1")[...] += x.T @ da
                    lay.view(grad, f"{p}.b1")[...] += da.sum(axis=0)
                dy = dy + da @ W1.T
        return dy

    def _inputs(self, g):
        g = np.asarray(g, dtype=float)
        single = g.ndim == 1 or g.shape == self.spec.input_dims
        g2 = g.reshape(1 if single else g.shape[0], -1)
        if g2.shape[1] != self.spec.input_dim:
            raise ValueError(f"input has {g2.shape[1]} entries per sample, network expects {self.spec.input_dim}")
        return (g2 - self.norm.in_mean) / self.norm.in_scale, single

    def forward(self, g, theta=None):
        """Return ``(g_rec, m_hat)`` in raw units; accepts one bundle or a batch."""
        theta = self.theta if theta is None else theta
        x, single = self._inputs(g)
        lat = self._run("enc", x, theta, [])
        rec = self._run("dec", lat, theta, []) * self.norm.in_scale + self.norm.in_mean
        m = self._run("pred", lat, theta, []) * self.norm.out_std + self.norm.out_mean
        if single:
            return rec[0], m[0]
        return rec, m

    def predict(self, g, theta=None):
        """``P(E(g))`` only."""
        theta = self.theta if theta is None else theta
        x, single = self._inputs(g)
        m = self._run("pred", self._run("enc", x, theta, []), theta, []) * self.norm.out_std + self.norm.out_mean
        return m[0] if single else m

    def loss_and_grad(self, g, m_true, mu, theta=None, need_grad=True):
        """Weighted loss of a batch and, optionally, its parameter gradient."""
        theta = self.theta if theta is None else theta
        x, _ = self._inputs(g)
        m_true = np.asarray(m_true, dtype=float).reshape(x.shape[0], -1)
        B = x.shape[0]
        if B == 0:
            raise ValueError("empty batch")
        ce, cd, cp = [], [], []
        lat = self._run("enc", x, theta, ce)
        y_rec = self._run("dec", lat, theta, cd)
        y_m = self._run("pred", lat, theta, cp)
        # raw-unit residuals
        r_rec = y_rec * self.norm.in_scale + self.norm.in_mean - np.asarray(g, dtype=float).reshape(B, -1)
        r_m = m_true - (y_m * self.norm.out_std + self.norm.out_mean)
        mu2 = np.asarray(mu, dtype=float) ** 2
        n_in = self.spec.input_dim
        loss = (np.abs(r_rec).sum() / n_in + 0.5 * np.sum(mu2 * r_m**2)) / B
        if not need_grad:
            return loss, None
        grad = np.zeros_like(theta)
        d_rec = np.sign(r_rec) * (self.norm.in_scale / (n_in * B))
        d_m = -(mu2 * r_m) * (self.norm.out_std / B)
        d_lat = self._back("dec", d_rec, theta, cd, grad)
        d_lat = d_lat + self._back("pred", d_m, theta, cp, grad)
        self._back("enc", d_lat, theta, ce, grad)
        return loss, grad

    def vjp_input(self, g, cot, theta=None):
        """``J^T cot`` for ``J`` the Jacobian of ``g -> P(E(g))`` at ``g``."""
        theta = self.theta if theta is None else theta
        x, single = self._inputs(g)
        cot = np.asarray(cot, dtype=float).reshape(x.shape[0], -1)
        if cot.shape[1] != self.spec.output_dim:
            raise ValueError("cotangent must have the feature-space length")
        ce, cp = [], []
        lat = self._run("enc", x, theta, ce)
        self._run("pred", lat, theta, cp)
        d = self._back("pred", cot * self.norm.out_std, theta, cp, None)
        d = self._back("enc", d, theta, ce, None) / self.norm.in_scale
        shape = np.shape(g)
        return d[0].reshape(shape) if single else d.reshape(shape)


# functional wrappers --------------------------------------------------------


def forward(net: Network, g, theta=None):
    return net.forward(g, theta)


def loss_weighted(net: Network, g, m_true, mu, theta=None) -> float:
    """Mean over the batch of ``mean|g - D(E(g))| + 0.5 ||mu * (m - P(E(g)))||^2``."""
    return net.loss_and_grad(g, m_true, mu, theta, need_grad=False)[0]


def grad_params(net: Network, g, m_true, mu, theta=None) -> np.ndarray:
    """Exact gradient of :func:`loss_weighted` (sign subgradient, 0 at 0)."""
    return net.loss_and_grad(g, m_true, mu, theta)[1]


def vjp_input(net: Network, g, cot, theta=None) -> np.ndarray:
    return net.vjp_input(g, cot, theta)


# training -------------------------------------------------------------------


@dataclass
class History:
    epochs: list = field(default_factory=list)

    def to_dict(self):
        return {"epochs": self.epochs}


def train(
    net: Network,
    train_g,
    train_m,
    mu,
    cfg: TrainConfig,
    val_g=None,
    val_m=None,
    log=None,
) -> History:
    """Adam on the weighted loss; updates ``net.theta`` in place.

    Shuffling uses ``cfg.seed``.  Raises :class:`TrainingDivergedError` if a
    batch loss is not finite.
    """
    rng = np.random.default_rng(cfg.seed)
    n = train_g.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    theta = net.theta
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = 0
    hist = History()
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        perm = rng.permutation(n)
        tot = 0.0
        t0 = time.perf_counter()
        for s in range(0, n, cfg.batch_size):
            idx = np.sort(perm[s : s + cfg.batch_size])
            loss, g = net.loss_and_grad(train_g[idx], train_m[idx], mu, theta)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {s // cfg.batch_size}")
            step += 1
            m1 *= cfg.beta1
            m1 += (1 - cfg.beta1) * g
            m2 *= cfg.beta2
            m2 += (1 - cfg.beta2) * g * g
            bc1 = 1 - cfg.beta1**step
            bc2 = 1 - cfg.beta2**step
            theta -= lr * (m1 / bc1) / (np.sqrt(m2 / bc2) + cfg.eps)
            tot += loss * len(idx)
        rec = {"epoch": epoch, "lr": lr, "train_loss": tot / n, "seconds": time.perf_counter() - t0}
        if val_g is not None and len(val_g):
            rec["val_loss"] = evaluate_loss(net, val_g, val_m, mu, cfg.batch_size)
        hist.epochs.append(rec)
        if log is not None:
            log(rec)
    return hist


def evaluate_loss(net: Network, g, m, mu, batch: int = 512) -> float:
    n = g.shape[0]
    tot = 0.0
    for s in range(0, n, batch):
        tot += loss_weighted(net, g[s : s + batch], m[s : s + batch], mu) * min(batch, n - s)
    return tot / n


# checkpoints ----------------------------------------------------------------

CKPT_FORMAT = "coupledfwi-model"
CKPT_VERSION = 1


def save_checkpoint(path, net: Network, mu, meta: dict | None = None) -> Path:
    """Write ``model.json``, ``weights.bin`` (flat f64le) and ``norm.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(net.theta, dtype="<f8").tofile(path / "weights.bin")
    np.ascontiguousarray(net.norm.to_vector(), dtype="<f8").tofile(path / "norm.bin")
    doc = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "dtype": "f64le",
        "spec": net.spec.to_dict(),
        "n_params": int(net.layout.size),
        "layout": net.layout.to_list(),
        "mu": [float(v) for v in np.asarray(mu, dtype=float)],
        "meta": meta or {},
    }
    with open(path / "model.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    return path


def load_checkpoint(path) -> tuple:
    """Return ``(network, mu, meta)``.

    Raises
    ------
    IncompatibleCheckpointError
        If the stored layout or weight count disagrees with the network spec.
    """
    path = Path(path)
    try:
        with open(path / "model.json", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IncompatibleCheckpointError(f"unreadable checkpoint at {path}") from exc
    if doc.get("format") != CKPT_FORMAT or doc.get("version") != CKPT_VERSION:
        raise IncompatibleCheckpointError("unknown checkpoint format")
    spec = NetworkSpec.from_dict(doc["spec"])
    layout = make_layout(spec)
    if doc.get("n_params") != layout.size or doc.get("layout") != layout.to_list():
        raise IncompatibleCheckpointError("checkpoint layout does not match its spec")
    theta = np.fromfile(path / "weights.bin", dtype="<f8")
    if theta.size != layout.size:
        raise IncompatibleCheckpointError(f"weights.bin holds {theta.size} values, layout needs {layout.size}")
    norm = Normalization.from_vector(np.fromfile(path / "norm.bin", dtype="<f8"), spec)
    mu = np.array(doc["mu"], dtype=float)
    if mu.size != spec.output_dim:
        raise IncompatibleCheckpointError("mu length differs from the output dimension")
    return Network(spec, theta.astype(float), norm), mu, doc.get("meta", {})
