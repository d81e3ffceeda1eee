import numpy as np
import pytest

from coupledfwi import nn


def tiny_spec(width=8, **kw):
    base = dict(input_dims=(2, 3, 4), output_dim=5, latent_dim=6, width=width, n_encoder=2, n_decoder=1, n_predictor=2)
    base.update(kw)
    return nn.NetworkSpec(**base)


def tiny_net(rng, width=8, **kw):
    spec = tiny_spec(width, **kw)
    theta = nn.init_params(spec, rng)
    # nonzero biases so that every parameter influences the loss
    theta += 0.05 * rng.standard_normal(theta.size)
    return nn.Network(spec, theta)


def batch(rng, spec, n=4):
    return rng.standard_normal((n, *spec.input_dims)), rng.standard_normal((n, spec.output_dim))


def test_init_deterministic_and_zero_biases():
    spec = tiny_spec()
    a = nn.init_params(spec, np.random.default_rng(1))
    b = nn.init_params(spec, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    lay = nn.make_layout(spec)
    for name, _, _ in lay.entries:
        if name.endswith((".b", ".b1", ".b2")):
            assert not lay.view(a, name).any()


def test_init_variance_laws():
    spec = nn.NetworkSpec((1, 1, 200), 10, latent_dim=100, width=128, n_encoder=4, n_decoder=1, n_predictor=1)
    lay = nn.make_layout(spec)
    theta = nn.init_params(spec, np.random.default_rng(0))
    for name in ("enc.in.W", "enc.b0.W1", "enc.b3.W1", "dec.in.W"):
        w = lay.view(theta, name)
        assert w.size >= 10**4
        assert abs(w.var() / (2.0 / w.shape[0]) - 1) < 0.2
    w2 = lay.view(theta, "enc.b0.W2")
    assert abs(w2.var() / (2.0 / (128 * 4)) - 1) < 0.2


def test_forward_shapes_and_repeatability(rng):
    net = tiny_net(rng)
    g = rng.standard_normal(net.spec.input_dims)
    rec, m = net.forward(g)
    assert rec.shape == (24,) and m.shape == (5,)
    rec2, m2 = net.forward(g)
    np.testing.assert_array_equal(rec, rec2)
    np.testing.assert_array_equal(m, m2)
    np.testing.assert_array_equal(net.predict(g), m)
    rb, mb = net.forward(np.stack([g, g]))
    assert rb.shape == (2, 24) and mb.shape == (2, 5)
    with pytest.raises(ValueError):
        net.forward(np.zeros(23))


def test_zeroed_residual_branch_is_identity(rng):
    net = tiny_net(rng)
    lay = net.layout
    theta = net.theta.copy()
    for name, _, _ in lay.entries:
        if ".b" in name and name.split(".")[-1] in ("W2", "b2"):
            lay.view(theta, name)[...] = 0.0
    x = rng.standard_normal((3, net.spec.width))
    path = [l for l in net._paths["enc"] if l[0] == "block"]
    net_blocks = nn.Network.__new__(nn.Network)
    net_blocks.__dict__.update(net.__dict__)
    net_blocks._paths = {"enc": path}
    np.testing.assert_array_equal(net_blocks._run("enc", x, theta, []), x)


def test_perfect_model_has_zero_loss(rng):
    spec = tiny_spec()
    net = nn.Network(spec, np.zeros(nn.make_layout(spec).size))
    g = np.zeros((2, *spec.input_dims))
    assert nn.loss_weighted(net, g, np.zeros((2, 5)), np.ones(5)) == 0.0


def _bias_only_net(rec_bias, pred_bias, input_dims, out_dim):
    spec = nn.NetworkSpec(input_dims, out_dim, latent_dim=2, width=2, n_encoder=0, n_decoder=0, n_predictor=0)
    net = nn.Network(spec, np.zeros(nn.make_layout(spec).size))
    net.layout.view(net.theta, "dec.out.b")[...] = rec_bias
    net.layout.view(net.theta, "pred.out.b")[...] = pred_bias
    return net


def test_loss_hand_computed_three_dim():
    # all weights zero: reconstruction and prediction equal the output biases
    net = _bias_only_net([1.0, -2.0, 0.5], [1.0, 2.0, 3.0], (1, 1, 3), 3)
    g = np.array([2.0, 0.0, 0.5])
    m = np.array([0.0, 4.0, 3.0])
    mu = np.array([1.0, 0.5, 2.0])
    # l1 mean: (1 + 2 + 0)/3 = 1; l2: 0.5 * (1 + 1 + 0) = 1
    assert nn.loss_weighted(net, g[None], m[None], mu) == pytest.approx(2.0, abs=1e-15)


def test_doubling_mu_quadruples_l2_term(rng):
    net = tiny_net(rng)
    g, m = batch(rng, net.spec)
    mu = rng.uniform(0.2, 1.0, 5)
    l1 = nn.loss_weighted(net, g, m, np.zeros(5))
    a = nn.loss_weighted(net, g, m, mu) - l1
    b = nn.loss_weighted(net, g, m, 2 * mu) - l1
    assert b == pytest.approx(4 * a, rel=1e-12)


def test_unit_mu_gives_plain_l2(rng):
    net = tiny_net(rng)
    g, m = batch(rng, net.spec)
    _, pred = net.forward(g)
    rec, _ = net.forward(g)
    manual = np.mean(np.abs(rec - g.reshape(4, -1)).mean(axis=1) + 0.5 * np.sum((m - pred) ** 2, axis=1))
    assert nn.loss_weighted(net, g, m, np.ones(5)) == pytest.approx(manual, rel=1e-13)


def test_loss_invariant_under_sample_order(rng):
    net = tiny_net(rng)
    g, m = batch(rng, net.spec, 6)
    perm = rng.permutation(6)
    mu = rng.uniform(0.2, 1, 5)
    assert nn.loss_weighted(net, g[perm], m[perm], mu) == pytest.approx(nn.loss_weighted(net, g, m, mu), rel=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_param_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = tiny_net(rng)
    g, m = batch(rng, net.spec)
    mu = rng.uniform(0.2, 1, 5)
    grad = nn.grad_params(net, g, m, mu)
    for _ in range(3):
        d = rng.standard_normal(net.theta.size)
        h = 1e-6
        fd = (nn.loss_weighted(net, g, m, mu, net.theta + h * d) - nn.loss_weighted(net, g, m, mu, net.theta - h * d)) / (2 * h)
        assert abs(fd - grad @ d) / abs(fd) < 1e-5


def test_gradient_over_batch_union_is_weighted_mean(rng):
    net = tiny_net(rng)
    g, m = batch(rng, net.spec, 5)
    mu = np.ones(5)
    ga = nn.grad_params(net, g[:2], m[:2], mu)
    gb = nn.grad_params(net, g[2:], m[2:], mu)
    np.testing.assert_allclose(nn.grad_params(net, g, m, mu), (2 * ga + 3 * gb) / 5, rtol=1e-10, atol=1e-14)


def test_detached_constant_head_has_zero_gradient(rng):
    net = tiny_net(rng)
    g, _ = batch(rng, net.spec)
    _, pred = net.forward(g)
    # with mu = 0 the predictor head is detached from the loss
    grad = nn.grad_params(net, g, pred + 3.0, np.zeros(5))
    lay = net.layout
    for name, _, _ in lay.entries:
        if name.startswith("pred."):
            assert not lay.view(grad, name).any()


@pytest.mark.parametrize("seed", range(3))
def test_input_vjp_matches_finite_differences(seed):
    rng = np.random.default_rng(10 + seed)
    net = tiny_net(rng)
    g = rng.standard_normal(net.spec.input_dims)
    c = rng.standard_normal(5)
    dg = rng.standard_normal(g.shape)
    eps = 1e-6
    fd = c @ (net.predict(g + eps * dg) - net.predict(g - eps * dg)) / (2 * eps)
    v = nn.vjp_input(net, g, c)
    assert v.shape == g.shape
    assert abs(fd - np.sum(v * dg)) / abs(fd) < 1e-4


def test_input_vjp_linear_in_cotangent(rng):
    net = tiny_net(rng)
    g = rng.standard_normal(net.spec.input_dims)
    c1, c2 = rng.standard_normal((2, 5))
    assert not net.vjp_input(g, np.zeros(5)).any()
    np.testing.assert_allclose(net.vjp_input(g, 2 * c1 - c2), 2 * net.vjp_input(g, c1) - net.vjp_input(g, c2), atol=1e-13)
    with pytest.raises(ValueError):
        net.vjp_input(g, np.zeros(4))


def test_vjp_respects_normalization(rng):
    net = tiny_net(rng)
    net.norm = nn.Normalization(rng.standard_normal(24), 3.0, rng.standard_normal(5), rng.uniform(1, 2, 5))
    g = rng.standard_normal(net.spec.input_dims)
    c = rng.standard_normal(5)
    dg = rng.standard_normal(g.shape)
    eps = 1e-6
    fd = c @ (net.predict(g + eps * dg) - net.predict(g - eps * dg)) / (2 * eps)
    assert abs(fd - np.sum(net.vjp_input(g, c) * dg)) / abs(fd) < 1e-5


def test_learning_rate_schedule():
    cfg = nn.TrainConfig()
    assert nn.learning_rate(cfg, 0) == 5e-4
    assert nn.learning_rate(cfg, 4) == 5e-4
    assert nn.learning_rate(cfg, 5) == pytest.approx(4.1667e-4, rel=1e-4)
    assert nn.learning_rate(cfg, 10) == pytest.approx(3.4722e-4, rel=1e-4)


def _toy(rng):
    spec = nn.NetworkSpec((1, 4, 5), 3, latent_dim=16, width=16, n_encoder=2, n_decoder=1, n_predictor=2)
    g = rng.standard_normal((100, 1, 4, 5))
    m = g.reshape(100, -1)[:, :3] @ np.diag([1.0, -2.0, 0.5]) + 1.0
    return spec, g, m


def test_toy_training_loss_halves():
    rng = np.random.default_rng(0)
    spec, g, m = _toy(rng)
    net = nn.Network(spec, rng=np.random.default_rng(1))
    hist = nn.train(net, g, m, np.ones(3), nn.TrainConfig(lr0=2e-3, batch_size=20, epochs=50, seed=3))
    losses = [e["train_loss"] for e in hist.epochs]
    assert len(losses) == 50
    assert losses[-1] <= 0.5 * losses[0]


def test_training_deterministic():
    rng = np.random.default_rng(0)
    spec, g, m = _toy(rng)
    out = []
    for _ in range(2):
        net = nn.Network(spec, rng=np.random.default_rng(1))
        nn.train(net, g, m, np.ones(3), nn.TrainConfig(batch_size=32, epochs=3, seed=5), val_g=g[:10], val_m=m[:10])
        out.append(net.theta.copy())
    np.testing.assert_array_equal(out[0], out[1])


def test_training_aborts_on_nan():
    rng = np.random.default_rng(0)
    spec, g, m = _toy(rng)
    m[7, 0] = np.nan
    net = nn.Network(spec, rng=np.random.default_rng(1))
    with pytest.raises(nn.TrainingDivergedError):
        nn.train(net, g, m, np.ones(3), nn.TrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path, rng):
    net = tiny_net(rng)
    net.norm = nn.Normalization(rng.standard_normal(24), 2.5, rng.standard_normal(5), rng.uniform(1, 2, 5))
    mu = rng.uniform(0.1, 1, 5)
    nn.save_checkpoint(tmp_path / "m", net, mu, {"note": "x"})
    back, mu2, meta = nn.load_checkpoint(tmp_path / "m")
    np.testing.assert_array_equal(mu2, mu)
    np.testing.assert_array_equal(back.theta, net.theta)
    assert meta == {"note": "x"}
    g = rng.standard_normal(net.spec.input_dims)
    for a, b in zip(net.forward(g), back.forward(g)):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_tampered_weight_count(tmp_path, rng):
    net = tiny_net(rng)
    p = nn.save_checkpoint(tmp_path / "m", net, np.ones(5))
    (p / "weights.bin").write_bytes((p / "weights.bin").read_bytes()[:-8])
    with pytest.raises(nn.IncompatibleCheckpointError):
        nn.load_checkpoint(p)


def test_checkpoint_layout_mismatch(tmp_path, rng):
    import json

    net = tiny_net(rng)
    p = nn.save_checkpoint(tmp_path / "m", net, np.ones(5))
    doc = json.loads((p / "model.json").read_text())
    doc["spec"]["width"] = 9
    (p / "model.json").write_text(json.dumps(doc))
    with pytest.raises(nn.IncompatibleCheckpointError):
        nn.load_checkpoint(p)
