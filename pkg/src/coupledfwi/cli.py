"""Command-line driver for the offline (data, training) and online (inversion) stages.

Subcommands::

    gen-data  --config C --out DIR [--seed S]
    train     --data DIR --config C --out CKPT
    invert    --model CKPT --signal FILE --terms J [--truth FILE] --out DIR
    hybrid    --model CKPT --signal FILE --terms J --bfgs-iters N --out DIR
    landscape --model CKPT --scan SPEC --out DIR
    eval      --model CKPT --data DIR --out DIR

Exit status is 0 on success, 2 for invalid arguments or configuration and 1
for runtime failures.  Failures print one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
from importlib import resources
import json
import os
from pathlib import Path
import platform
import sys
import time

import jsonschema
import numpy as np

from . import __version__, analysis, datagen, inversion, nn
from . import velocity as vel
from .wave import EXTRA_SOURCE_CENTERS, GridSpec, WaveForward, dipole_source

WORKERS_ENV = "COUPLEDFWI_WORKERS"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def config_schema() -> dict:
    return json.loads(resources.files("coupledfwi").joinpath("schema/config.schema.json").read_text("utf-8"))


def load_config(path) -> tuple:
    """Read and validate a JSON run configuration; returns ``(config, sha256)``."""
    try:
        raw = Path(path).read_bytes()
        cfg = json.loads(raw)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        jsonschema.validate(cfg, config_schema())
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {loc}: {exc.message}") from exc
    return cfg, hashlib.sha256(raw).hexdigest()


def data_config(cfg: dict, seed: int | None) -> datagen.DataConfig:
    try:
        return datagen.DataConfig(
            grid=GridSpec(**cfg.get("grid", {})),
            sources=tuple(tuple(s) for s in cfg.get("sources", datagen.TRAINING_SOURCE_CENTERS)),
            features=vel.FeatureSpec.from_dict(cfg.get("features", {"kind": "fourier", "modes": 5})),
            alpha=cfg.get("alpha", 0.0),
            enrich_modes=cfg.get("enrich_modes", 0),
            velocity_range=tuple(cfg.get("velocity_range", (7.0, 15.0))),
            n_samples=cfg.get("n_samples", 0),
            noise=datagen.NoiseSpec(**cfg.get("noise", {})),
            seed=cfg.get("seed", 0) if seed is None else seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def resolve_workers(flag: int | None, cfg: dict | None = None) -> int:
    """Flag, then environment, then config, then 1."""
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
    if cfg and "workers" in cfg:
        return cfg["workers"]
    return 1


def provenance(args, config_hash=None, seed=None, workers=1) -> dict:
    import numba

    return {
        "tool": "coupledfwi",
        "version": __version__,
        "command": args.command,
        "argv": [a for a in sys.argv[1:]] if sys.argv else [],
        "config_sha256": config_hash,
        "seed": seed,
        "workers": workers,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
    }


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)


# ---------------------------------------------------------------------------
# model helpers


def _load_model(path):
    net, mu, meta = nn.load_checkpoint(path)
    if "data" not in meta:
        raise ConfigError(f"{path}: checkpoint lacks the data configuration")
    dcfg = datagen.DataConfig.from_dict(meta["data"])
    op = inversion.NetworkInverse(net, dcfg.features, dcfg.grid)
    return net, mu, meta, dcfg, op


def _read_signal(path, shape=None):
    arr, side = datagen.read_tensor(path)
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ValueError(f"{path}: signal has shape {arr.shape}, expected {tuple(shape)}")
    return arr, side


def extended_forward(dcfg: datagen.DataConfig) -> WaveForward:
    """All seven sources, receivers on both surfaces."""
    grid = dcfg.grid.replace(receiver_side="both")
    centers = tuple(dcfg.sources) + tuple(EXTRA_SOURCE_CENTERS)
    return WaveForward(grid, [dipole_source(grid, a, b) for a, b in centers])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    cfg, h = load_config(args.config)
    dcfg = data_config(cfg, args.seed)
    workers = resolve_workers(args.workers, cfg)
    ds = datagen.synthesize(dcfg, args.out, workers=workers)
    _write_json(Path(args.out) / "provenance.json", provenance(args, h, dcfg.seed, workers))
    return {"samples": len(ds), "out": str(args.out)}


def cmd_train(args):
    cfg, h = load_config(args.config)
    ds = datagen.read_dataset(args.data)
    dcfg = ds.config
    tcfg = dict(cfg.get("train", {}))
    frac = tcfg.pop("train_fraction", 0.8)
    try:
        tc = nn.TrainConfig(**tcfg)
        spec = nn.NetworkSpec(dcfg.signal_shape, dcfg.feature_dim, **cfg.get("network", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    n = len(ds)
    tr, te = datagen.split(n, frac, np.random.default_rng(tc.seed))
    g = np.asarray(ds.signals[tr]).reshape(len(tr), -1)
    m = np.asarray(ds.targets[tr])
    vg = np.asarray(ds.signals[te]).reshape(len(te), -1)
    vm = np.asarray(ds.targets[te])
    net = nn.Network(spec, rng=np.random.default_rng(tc.seed))
    net.norm = nn.Normalization.fit(g, m)
    mu = dcfg.features.weights(dcfg.grid)
    hist = nn.train(net, g, m, mu, tc, vg, vm)
    meta = {
        "data": dcfg.to_dict(),
        "train": tc.__dict__,
        "train_fraction": frac,
        "split": {"train": tr.tolist(), "test": te.tolist()},
        "history": hist.to_dict(),
    }
    nn.save_checkpoint(args.out, net, mu, meta)
    _write_json(Path(args.out) / "provenance.json", provenance(args, h, tc.seed))
    emit = [{k: r.get(k) for k in ("epoch", "lr", "train_loss", "val_loss")} for r in hist.epochs]
    analysis.emit_report(emit, Path(args.out) / "loss_history.csv", "csv", ["epoch", "lr", "train_loss", "val_loss"])
    return {"epochs": len(hist.epochs), "final_train_loss": hist.epochs[-1]["train_loss"] if hist.epochs else None}


def cmd_invert(args):
    net, mu, meta, dcfg, op = _load_model(args.model)
    g, _ = _read_signal(args.signal, dcfg.signal_shape)
    truth = datagen.read_tensor(args.truth)[0] if args.truth else None
    if truth is not None and truth.shape != dcfg.grid.shape:
        raise ValueError("truth field does not match the model grid")
    fwd = dcfg.forward()
    clamp = inversion.clamp_range(dcfg.grid, dcfg.velocity_range)
    norms = lambda a, b: analysis.error_norms(a, b, dcfg.grid)
    res = inversion.neumann_reconstruct(op, g, fwd, inversion.NeumannOpts(args.terms, clamp), truth, norms)
    out = Path(args.out)
    datagen.write_tensor(out / "reconstruction.bin", res.m, kind="mesh_field", terms=args.terms, grid=dcfg.grid.to_dict())
    info = {
        "terms": args.terms,
        "gamma": 0.0,
        "clamp": list(clamp),
        "clamp_events": res.clamp_events,
        "cpu_seconds": res.seconds,
    }
    if truth is not None:
        info["l2_errors"] = res.l2_errors
        info["linf_errors"] = res.linf_errors
        analysis.emit_report(analysis.neumann_rows(res), out / "errors.csv", "csv", analysis.NEUMANN_COLUMNS)
    _write_json(out / "reconstruction_meta.json", info)
    _write_json(out / "provenance.json", provenance(args))
    return {"terms": args.terms, "l2_error": res.l2_errors[-1] if res.l2_errors else None}


def cmd_hybrid(args):
    net, mu, meta, dcfg, op = _load_model(args.model)
    full = extended_forward(dcfg)
    g, _ = _read_signal(args.signal, full.data_shape)
    clamp = inversion.clamp_range(dcfg.grid, dcfg.velocity_range)
    opts = inversion.BfgsOpts(max_iter=args.bfgs_iters, gtol=args.gtol)
    res = inversion.hybrid_reconstruct(op, g, args.terms, opts, full, dcfg.forward(), len(dcfg.sources), clamp)
    out = Path(args.out)
    datagen.write_tensor(out / "warm_start.bin", res.warm_start, kind="mesh_field", terms=args.terms)
    datagen.write_tensor(out / "reconstruction.bin", res.m, kind="mesh_field", terms=args.terms, bfgs_iters=res.bfgs.iterations)
    rows = [{"iteration": i, "psi": v} for i, v in enumerate(res.bfgs.trace)]
    analysis.emit_report(rows, out / "bfgs_trace.csv", "csv", ["iteration", "psi"])
    info = {"terms": args.terms, "psi_warm": res.psi_warm, "psi_final": res.psi_final, "status": res.bfgs.status}
    if args.truth:
        truth = datagen.read_tensor(args.truth)[0]
        info["l2_error_warm"], info["linf_error_warm"] = analysis.error_norms(truth, res.warm_start, dcfg.grid)
        info["l2_error"], info["linf_error"] = analysis.error_norms(truth, res.m, dcfg.grid)
    _write_json(out / "hybrid_meta.json", info)
    _write_json(out / "provenance.json", provenance(args))
    return info


SCAN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["type"],
    "properties": {
        "type": {"enum": ["location", "line"]},
        "background": {"type": "number"},
        "amplitude": {"type": "number"},
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "true_center": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "x": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "z": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "kind": {"enum": ["psi", "phi", "both"]},
        "mode": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
        "h": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "base": {"enum": ["identity", "network-roundtrip"]},
        "coeffs": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
    },
}


def cmd_landscape(args):
    net, mu, meta, dcfg, op = _load_model(args.model)
    try:
        scan = json.loads(Path(args.scan).read_text("utf-8"))
        jsonschema.validate(scan, SCAN_SCHEMA)
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise ConfigError(f"{args.scan}: {getattr(exc, 'message', exc)}") from exc
    fwd = dcfg.forward()
    grid = dcfg.grid
    out = Path(args.out)
    workers = resolve_workers(args.workers)
    if scan["type"] == "location":
        tmpl = vel.GaussianMixture.isotropic(
            scan.get("background", 10.0), scan.get("amplitude", 5.0), tuple(scan.get("true_center", (0.5, -0.5))), scan.get("sigma", 0.1)
        )
        g = fwd(vel.eval_gaussian(tmpl, grid))
        xs = np.linspace(*scan.get("x", [0.1, 0.9, 21])[:2], int(scan.get("x", [0, 0, 21])[2]))
        zs = np.linspace(*scan.get("z", [-0.9, -0.1, 21])[:2], int(scan.get("z", [0, 0, 21])[2]))
        surf = analysis.location_scan(g, tmpl, xs, zs, op, fwd, workers=workers)
        datagen.write_tensor(out / "psi_surface.bin", surf["psi"], kind="surface", x=xs.tolist(), z=zs.tolist())
        datagen.write_tensor(out / "phi_surface.bin", surf["phi"], kind="surface", x=xs.tolist(), z=zs.tolist())
        summary = {}
        for key in ("psi", "phi"):
            iz, ix = np.unravel_index(np.argmin(surf[key]), surf[key].shape)
            summary[key] = {
                "local_minima": analysis.local_minima_count(surf[key]),
                "argmin": [float(xs[ix]), float(zs[iz])],
            }
    else:
        coeffs = np.array(scan.get("coeffs", [[11.0]]), dtype=float)
        m = vel.eval_fourier(vel.FourierCoeffs(coeffs), grid)
        g = fwd(m)
        h = scan.get("h", [-1.0, 1.0, 41])
        spec = analysis.ScanSpec(tuple(scan.get("mode", (1, 1))), h[0], h[1], int(h[2]), scan.get("base", "identity"))
        clamp = inversion.clamp_range(grid, dcfg.velocity_range)
        kinds = ("psi", "phi") if scan.get("kind", "both") == "both" else (scan["kind"],)
        summary = {}
        for key in kinds:
            tab = analysis.line_scan(key, g, m, spec, op, fwd, clamp)
            analysis.emit_report([{"h": a, "value": b} for a, b in tab], out / f"{key}_line.csv", "csv", ["h", "value"])
            summary[key] = {"local_minima": analysis.local_minima_count(tab[:, 1])}
    _write_json(out / "landscape.json", summary)
    _write_json(out / "provenance.json", provenance(args, workers=workers))
    return summary


def cmd_eval(args):
    net, mu, meta, dcfg, op = _load_model(args.model)
    ds = datagen.read_dataset(args.data)
    if ds.config.signal_shape != dcfg.signal_shape or ds.config.feature_dim != dcfg.feature_dim:
        raise ValueError("dataset shapes do not match the model")
    same = ds.manifest["config"] == meta.get("data")
    idx = np.array(meta["split"]["test"]) if same and "split" in meta else np.arange(len(ds))
    pred = np.concatenate([net.predict(np.asarray(ds.signals[idx[s : s + 512]]).reshape(-1, net.spec.input_dim)) for s in range(0, len(idx), 512)]) if len(idx) else np.zeros((0, dcfg.feature_dim))
    true = np.asarray(ds.targets[idx])
    out = Path(args.out)
    datagen.write_tensor(out / "predictions.bin", pred, kind="features", indices=idx.tolist())
    metrics = {"samples": int(len(idx)), "held_out": bool(same)}
    if len(idx):
        metrics["loss"] = nn.evaluate_loss(net, np.asarray(ds.signals[idx]).reshape(len(idx), -1), true, mu)
        if dcfg.features.kind == "fourier":
            M = dcfg.features.modes
            err = np.abs(true - pred).reshape(-1, M, M).mean(axis=0)
            datagen.write_tensor(out / "spectral_error.bin", err, kind="mean_abs_coeff_error")
            k = np.maximum.outer(np.arange(M), np.arange(M))
            metrics["mean_abs_error_low"] = float(err[k <= 2].mean())
            if np.any(k >= 4):
                metrics["mean_abs_error_high"] = float(err[k >= 4].mean())
        l2 = [analysis.error_norms(dcfg.features.to_field(t, dcfg.grid), dcfg.features.to_field(p, dcfg.grid), dcfg.grid)[0] for t, p in zip(true, pred)]
        metrics["median_l2_error"] = float(np.median(l2))
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "provenance.json", provenance(args))
    return metrics


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coupledfwi", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="synthesize a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train the approximate inverse")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("invert", help="truncated Neumann reconstruction")
    s.add_argument("--model", required=True)
    s.add_argument("--signal", required=True)
    s.add_argument("--terms", type=int, required=True)
    s.add_argument("--truth")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("hybrid", help="Neumann warm start followed by BFGS on the data misfit")
    s.add_argument("--model", required=True)
    s.add_argument("--signal", required=True)
    s.add_argument("--terms", type=int, required=True)
    s.add_argument("--bfgs-iters", type=int, required=True)
    s.add_argument("--gtol", type=float, default=1e-10)
    s.add_argument("--truth")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_hybrid)

    s = sub.add_parser("landscape", help="objective scans")
    s.add_argument("--model", required=True)
    s.add_argument("--scan", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_landscape)

    s = sub.add_parser("eval", help="validation metrics of a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_eval)
    return p


def _fail(kind, exc, code):
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"status": "error", "kind": kind, "type": type(exc).__name__, "message": msg}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for flag in ("terms", "bfgs_iters"):
        v = getattr(args, flag, None)
        if v is not None and v < (1 if flag == "terms" else 0):
            return _fail("usage", ValueError(f"--{flag.replace('_', '-')} out of range"), 2)
    t0 = time.perf_counter()
    try:
        summary = args.func(args)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except (datagen.CorruptDatasetError, datagen.UnsupportedVersionError, nn.IncompatibleCheckpointError) as exc:
        return _fail("input", exc, 1)
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        return _fail("runtime", exc, 1)
    print(json.dumps({"status": "ok", "command": args.command, "seconds": round(time.perf_counter() - t0, 3), **(summary or {})}, default=float))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
