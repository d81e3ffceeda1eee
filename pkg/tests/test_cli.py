import json
import subprocess
import sys
import time

import numpy as np
import pytest

from coupledfwi import cli, datagen, nn
from coupledfwi import velocity as vel

SMALL = {
    "grid": {"cells_per_side": 12, "dt": 0.003, "t_final": 0.18, "record_stride": 5},
    "features": {"kind": "fourier", "modes": 3},
    "n_samples": 24,
    "network": {"latent_dim": 8, "width": 8, "n_encoder": 1, "n_decoder": 1, "n_predictor": 1},
    "train": {"epochs": 2, "batch_size": 8, "seed": 4},
    "seed": 9,
}


def write_config(tmp_path, cfg, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def ok(argv, capsys):
    code = cli.run(argv)
    out, err = capsys.readouterr()
    assert code == 0, err
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    cfg = write_config(d, SMALL)
    assert cli.run(["gen-data", "--config", cfg, "--out", str(d / "data")]) == 0
    assert cli.run(["train", "--data", str(d / "data"), "--config", cfg, "--out", str(d / "model")]) == 0
    return d


def test_gen_data_small(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "n_samples": 4})
    res = ok(["gen-data", "--config", cfg, "--out", str(tmp_path / "d"), "--seed", "3"], capsys)
    assert res["samples"] == 4
    ds = datagen.read_dataset(tmp_path / "d")
    assert ds.signals.shape == (4, 3, 13, 13)
    prov = json.loads((tmp_path / "d" / "provenance.json").read_text())
    assert prov["seed"] == 3 and len(prov["config_sha256"]) == 64


@pytest.mark.parametrize("bad", [{"n_samples": -1}, {"grid": {"cells": 4}}, {"colour": "red"}, {"features": {"kind": "wavelet"}}])
def test_bad_config_exit_2(tmp_path, capsys, bad):
    cfg = write_config(tmp_path, {**SMALL, **bad})
    assert cli.run(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["status"] == "error" and err["kind"] == "config"


def test_unparsable_config_and_usage(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert cli.run(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == 2
    assert cli.run(["frobnicate"]) == 2
    assert cli.run(["invert", "--model", "m", "--signal", "s", "--terms", "0", "--out", "o"]) == 2


def test_runtime_failure_exit_1(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "velocity_range": [7.0, 40.0], "n_samples": 1})
    assert cli.run(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["type"] == "CFLError"


def test_missing_model_exit_1(tmp_path, capsys):
    assert cli.run(["eval", "--model", str(tmp_path / "none"), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    assert json.loads(capsys.readouterr().err.strip())["type"] == "IncompatibleCheckpointError"


def test_worker_precedence(monkeypatch):
    monkeypatch.delenv(cli.WORKERS_ENV, raising=False)
    assert cli.resolve_workers(None, {}) == 1
    assert cli.resolve_workers(None, {"workers": 3}) == 3
    monkeypatch.setenv(cli.WORKERS_ENV, "2")
    assert cli.resolve_workers(None, {"workers": 3}) == 2
    assert cli.resolve_workers(4, {"workers": 3}) == 4
    monkeypatch.setenv(cli.WORKERS_ENV, "many")
    with pytest.raises(cli.ConfigError):
        cli.resolve_workers(None)


def test_train_outputs(trained):
    net, mu, meta = nn.load_checkpoint(trained / "model")
    assert len(meta["history"]["epochs"]) == 2
    assert sorted(meta["split"]["train"] + meta["split"]["test"]) == list(range(24))
    header = (trained / "model" / "loss_history.csv").read_text().splitlines()[0]
    assert header == "epoch,lr,train_loss,val_loss"
    np.testing.assert_array_equal(mu, vel.FeatureSpec("fourier", 3).weights())


def test_invert_j1_equals_eval_prediction(trained, capsys):
    d = trained
    ds = datagen.read_dataset(d / "data")
    _, _, meta = nn.load_checkpoint(d / "model")
    i = meta["split"]["test"][0]
    datagen.write_tensor(d / "sig.bin", np.asarray(ds.signals[i]), kind="signal")
    datagen.write_tensor(d / "truth.bin", ds.velocity(i), kind="mesh_field")
    ok(["eval", "--model", str(d / "model"), "--data", str(d / "data"), "--out", str(d / "ev")], capsys)
    res = ok(["invert", "--model", str(d / "model"), "--signal", str(d / "sig.bin"), "--terms", "1", "--truth", str(d / "truth.bin"), "--out", str(d / "inv")], capsys)
    pred, side = datagen.read_tensor(d / "ev" / "predictions.bin")
    assert side["indices"][0] == i
    field, _ = datagen.read_tensor(d / "inv" / "reconstruction.bin")
    # eval predicts in batches, so agreement is to rounding rather than bitwise
    np.testing.assert_allclose(field, vel.FeatureSpec("fourier", 3).to_field(pred[0], ds.config.grid), rtol=1e-12)
    assert res["l2_error"] is not None
    metrics = json.loads((d / "ev" / "metrics.json").read_text())
    assert metrics["held_out"] and metrics["samples"] == len(meta["split"]["test"])
    assert (d / "inv" / "errors.csv").read_text().startswith("J,l2_error,linf_error,cpu_seconds")


def test_invert_rejects_wrong_signal_shape(trained, capsys):
    datagen.write_tensor(trained / "bad.bin", np.zeros((2, 2)))
    assert cli.run(["invert", "--model", str(trained / "model"), "--signal", str(trained / "bad.bin"), "--terms", "2", "--out", str(trained / "x")]) == 1


def test_hybrid_and_landscape(trained, capsys):
    d = trained
    dcfg = datagen.read_dataset(d / "data").config
    full = cli.extended_forward(dcfg)
    assert full.data_shape == (7, dcfg.grid.n_records, 2 * (dcfg.grid.cells_per_side + 1))
    datagen.write_tensor(d / "full.bin", full(np.full(dcfg.grid.shape, 11.0)), kind="signal")
    res = ok(["hybrid", "--model", str(d / "model"), "--signal", str(d / "full.bin"), "--terms", "2", "--bfgs-iters", "3", "--out", str(d / "hy")], capsys)
    assert res["psi_final"] <= res["psi_warm"]
    scan = d / "scan.json"
    scan.write_text(json.dumps({"type": "location", "x": [0.3, 0.7, 3], "z": [-0.7, -0.3, 3]}))
    res = ok(["landscape", "--model", str(d / "model"), "--scan", str(scan), "--out", str(d / "ls")], capsys)
    surf, side = datagen.read_tensor(d / "ls" / "psi_surface.bin")
    assert surf.shape == (3, 3) and surf[1, 1] == 0.0
    assert res["psi"]["argmin"] == [0.5, -0.5]
    scan.write_text(json.dumps({"type": "line", "h": [-0.5, 0.5, 5], "kind": "psi"}))
    res = ok(["landscape", "--model", str(d / "model"), "--scan", str(scan), "--out", str(d / "ll")], capsys)
    assert (d / "ll" / "psi_line.csv").read_text().splitlines()[0] == "h,value"
    scan.write_text(json.dumps({"type": "spiral"}))
    assert cli.run(["landscape", "--model", str(d / "model"), "--scan", str(scan), "--out", str(d / "lx")]) == 2


def test_pipeline_deterministic(tmp_path, trained):
    cfg = write_config(tmp_path, SMALL)
    assert cli.run(["gen-data", "--config", cfg, "--out", str(tmp_path / "data"), "--workers", "1"]) == 0
    assert cli.run(["train", "--data", str(tmp_path / "data"), "--config", cfg, "--out", str(tmp_path / "model")]) == 0
    for name in ("data/signals.bin", "data/targets.bin", "model/weights.bin", "model/norm.bin"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, {**SMALL, "n_samples": 2})
    proc = subprocess.run([sys.executable, "-m", "coupledfwi", "gen-data", "--config", cfg, "--out", str(tmp_path / "d")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["status"] == "ok"


@pytest.mark.slow
def test_smoke_pipeline_table_grid(tmp_path, capsys):
    t0 = time.perf_counter()
    cfg = write_config(tmp_path, {"n_samples": 200, "train": {"epochs": 3}, "seed": 1})
    ok(["gen-data", "--config", cfg, "--out", str(tmp_path / "data")], capsys)
    ok(["train", "--data", str(tmp_path / "data"), "--config", cfg, "--out", str(tmp_path / "model")], capsys)
    ds = datagen.read_dataset(tmp_path / "data")
    datagen.write_tensor(tmp_path / "sig.bin", np.asarray(ds.signals[0]))
    res = ok(["invert", "--model", str(tmp_path / "model"), "--signal", str(tmp_path / "sig.bin"), "--terms", "5", "--out", str(tmp_path / "inv")], capsys)
    assert res["terms"] == 5
    assert time.perf_counter() - t0 < 600
