import numpy as np
import pytest

from cfpf import kernels
from cfpf.channel import NetworkConfig, drop_network
from cfpf.dataset import build_input, fit_normalization, generate
from cfpf.metrics import net_se
from cfpf.rdn import (
    AdamState,
    PowerRDN,
    RDNConfig,
    TrainConfig,
    adam_step,
    backward,
    count_parameters,
    forward,
    init_parameters,
    loss,
    pack_rdn,
    parameter_shapes,
    predict_and_refine,
    rmse,
    train,
)
from cfpf.solver import build_quadratic_forms, filter_sinr, solve_alternating

TINY = RDNConfig(M=6, K=4, tau=2, G=4, L=2)


def random_params(cfg, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return {k: scale * rng.standard_normal(s) for k, s in parameter_shapes(cfg).items()}


def batch(cfg, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cfg.K, cfg.M + 1))
    y = rng.uniform(0, 1, (n, cfg.K))
    return x, y


# -- parameter accounting --------------------------------------------------------

@pytest.mark.parametrize("G, L, M, total", [(16, 3, 20, 15409), (32, 4, 80, 100353), (1, 1, 1, 26)])
def test_parameter_counts(G, L, M, total):
    cfg = RDNConfig(M=M, K=8, tau=4, G=G, L=L)
    w, b, t = count_parameters(cfg)
    params = init_parameters(cfg, 0)
    assert t == total
    assert sum(v.size for v in params.values()) == total
    assert sum(v.size for k, v in params.items() if k.endswith("_b")) == b
    assert w + b == t


def test_parameter_breakdown_smallest():
    assert count_parameters(RDNConfig(M=1, K=1, tau=1, G=1, L=1)) == (22, 4, 26)


def test_desk_shapes():
    s = parameter_shapes(RDNConfig(M=20, K=8, tau=4, G=16, L=3))
    assert s["fel_w"] == (16, 1, 21)
    assert [s[f"rdb{l}_w"] for l in (1, 2, 3)] == [(16, 3, 3, 16), (16, 3, 3, 32), (16, 3, 3, 48)]
    assert s["fuse_w"] == (16, 1, 1, 64)
    assert s["frl_w"] == (1, 3, 3, 16)


def test_init_deterministic_and_glorot_bounded():
    cfg = RDNConfig(M=20, K=8, tau=4, G=16, L=3)
    a, b = init_parameters(cfg, 3), init_parameters(cfg, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["fel_w"], init_parameters(cfg, 4)["fel_w"])
    # rdb3: fan_in = 9*48, fan_out = 9*16
    bound = np.sqrt(6.0 / (9 * 48 + 9 * 16))
    assert np.abs(a["rdb3_w"]).max() <= bound
    assert np.abs(a["rdb3_w"]).max() > 0.9 * bound
    assert all(np.all(a[k] == 0) for k in a if k.endswith("_b"))


# -- forward ------------------------------------------------------------------------

def test_zero_parameters_give_half():
    params = {k: np.zeros(s) for k, s in parameter_shapes(TINY).items()}
    p, _ = forward(params, np.random.default_rng(0).standard_normal((3, 4, 7)), TINY)
    assert np.all(p == 0.5)


def test_output_in_unit_interval():
    x, _ = batch(TINY, 20, 1)
    p, _ = forward(random_params(TINY, 1, scale=1.0), x, TINY)
    assert np.all((p > 0) & (p < 1))


def test_single_and_batched_agree():
    x, _ = batch(TINY, 3, 2)
    params = random_params(TINY, 2)
    pb, _ = forward(params, x, TINY)
    assert np.array_equal(forward(params, x[1], TINY)[0], pb[1])


def test_receptive_field():
    cfg = RDNConfig(M=5, K=12, tau=3, G=3, L=2)
    params = random_params(cfg, 5)
    x = np.random.default_rng(5).standard_normal((cfg.K, cfg.M + 1))
    k = 2
    x2 = x.copy()
    x2[k] += 1.0
    changed = forward(params, x, cfg)[0] != forward(params, x2, cfg)[0]
    radius = cfg.L + 1
    assert np.all(~changed[np.abs(np.arange(cfg.K) - k) > radius])
    assert changed[k + radius]


def test_residual_identity():
    # with the fusion zeroed the block must pass B0 straight through
    params = random_params(TINY, 6)
    params["fuse_w"][:] = 0
    params["fuse_b"][:] = 0
    x, _ = batch(TINY, 2, 6)
    b0 = np.tanh(x @ params["fel_w"][:, 0, :].T + params["fel_b"])
    w = params["frl_w"][0, :, 1, :]
    pad = np.pad(b0, ((0, 0), (1, 1), (0, 0)))
    z = pad[:, :-2] @ w[0] + pad[:, 1:-1] @ w[1] + pad[:, 2:] @ w[2] + params["frl_b"][0]
    assert np.allclose(forward(params, x, TINY)[0], 1 / (1 + np.exp(-z)), rtol=1e-13)


def test_input_shape_checked():
    with pytest.raises(ValueError):
        forward(random_params(TINY, 0), np.zeros((2, 4, 6)), TINY)


@pytest.mark.parametrize("inner, output", [("tanh", "sigmoid"), ("relu", "sigmoid"), ("tanh", "tanh")])
def test_kernel_forward_parity(backend, inner, output):
    cfg = RDNConfig(M=6, K=5, tau=2, G=3, L=3, inner=inner, output=output)
    params = random_params(cfg, 9)
    x, _ = batch(cfg, 4, 9)
    pb, _ = forward(params, x, cfg)
    kern = kernels.get(backend)
    for i in range(4):
        assert np.allclose(kern.rdn_forward(np.ascontiguousarray(x[i]), *pack_rdn(params, cfg)),
                           pb[i], rtol=1e-12, atol=1e-15)


# -- loss, rmse, backward ---------------------------------------------------------------

def test_rmse_values():
    assert rmse([0.2, 0.3], [0.2, 0.3]) == 0
    assert rmse([1, 0], [0, 1]) == pytest.approx(np.sqrt(2))


@pytest.mark.parametrize("inner", ["tanh", "relu"])
def test_backward_matches_finite_differences(inner):
    cfg = RDNConfig(M=6, K=4, tau=2, G=4, L=2, inner=inner)
    params = random_params(cfg, 11)
    x, y = batch(cfg, 3, 11)
    p, cache = forward(params, x, cfg)
    grads = backward(params, cache, y, cfg)
    h = 1e-5
    worst = 0.0
    for name, w in params.items():
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + h
            up = loss(forward(params, x, cfg)[0], y)
            w[idx] = orig - h
            down = loss(forward(params, x, cfg)[0], y)
            w[idx] = orig
            fd[idx] = (up - down) / (2 * h)
        err = np.abs(grads[name] - fd) / np.maximum(np.abs(fd), 1e-6)
        worst = max(worst, float(err.max()))
    assert worst < 1e-4


def test_gradients_vanish_at_target():
    params = random_params(TINY, 12)
    x, _ = batch(TINY, 3, 12)
    p, cache = forward(params, x, TINY)
    grads = backward(params, cache, p, TINY)
    assert all(np.all(g == 0) for g in grads.values())


def test_zero_frl_blocks_fel_gradients():
    params = random_params(TINY, 13)
    params["frl_w"][:] = 0
    x, y = batch(TINY, 3, 13)
    _, cache = forward(params, x, TINY)
    grads = backward(params, cache, y, TINY)
    assert np.all(grads["fel_w"] == 0) and np.all(grads["fel_b"] == 0)
    assert np.any(grads["frl_w"] != 0)


def test_outer_kernel_columns_get_no_gradient():
    params = random_params(TINY, 14)
    x, y = batch(TINY, 3, 14)
    _, cache = forward(params, x, TINY)
    g = backward(params, cache, y, TINY)
    for name in ("rdb1_w", "rdb2_w", "frl_w"):
        assert np.all(g[name][:, :, [0, 2], :] == 0)


# -- optimizer ------------------------------------------------------------------------------

@pytest.mark.parametrize("g", [3.7, -0.002])
def test_adam_first_step(g):
    params = {"w": np.array([1.0])}
    state = AdamState(params)
    lr = 1e-3
    adam_step(params, {"w": np.array([g])}, state, lr)
    assert params["w"][0] - 1.0 == pytest.approx(-lr * np.sign(g), abs=lr * 1e-4)


def test_adam_zero_gradient_fixed_point():
    params = {"w": np.array([0.3, -2.0])}
    state = AdamState(params)
    for _ in range(100):
        adam_step(params, {"w": np.zeros(2)}, state, 0.1)
    assert params["w"].tolist() == [0.3, -2.0]


def test_adam_deterministic():
    results = []
    for _ in range(2):
        params = {"w": np.array([0.5, 1.5])}
        state = AdamState(params)
        for i in range(5):
            adam_step(params, {"w": np.array([0.1 * i, -1.0])}, state, 0.01)
        results.append(params["w"].copy())
    assert np.array_equal(*results)


# -- training ------------------------------------------------------------------------------

def test_lr_schedule():
    t = TrainConfig()
    assert [t.lr_at(e) for e in (1, 20)] == [1e-4, 1e-4]
    assert t.lr_at(21) == pytest.approx(1e-5, rel=1e-12)
    assert t.lr_at(40) == pytest.approx(1e-5, rel=1e-12)
    assert t.lr_at(41) == pytest.approx(1e-6, rel=1e-12)


def test_train_deterministic():
    x, y = batch(TINY, 30, 20)
    tcfg = TrainConfig(epochs=4, batch_size=8, lr=1e-3)
    a = train(x[:20], y[:20], x[20:], y[20:], TINY, tcfg)
    b = train(x[:20], y[:20], x[20:], y[20:], TINY, tcfg)
    assert a.curve == b.curve
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_best_checkpoint_bookkeeping():
    x, y = batch(TINY, 30, 21)
    res = train(x[:20], y[:20], x[20:], y[20:], TINY, TrainConfig(epochs=8, batch_size=4, lr=3e-3))
    val = [c[3] for c in res.curve]
    assert res.best_epoch == int(np.argmin(val)) + 1
    p, _ = forward(res.params, x[20:], TINY)
    assert np.mean(rmse(y[20:], p)) == pytest.approx(min(val), rel=1e-12)


def test_overfit_probe_small():
    # 10 samples as both train and val, no learning-rate drop
    cfg = RDNConfig(M=6, K=4, tau=2, G=8, L=2)
    x, y = batch(cfg, 10, 22)
    tcfg = TrainConfig(epochs=2000, batch_size=10, lr=1e-3, drop_period=10**6)
    res = train(x, y, x, y, cfg, tcfg)
    assert res.curve[-1][2] < 1e-2


# -- checkpoint and inference -------------------------------------------------------------------

SMALL_NET = NetworkConfig(M=6, K=4, tau=2)


@pytest.fixture(scope="module")
def small_model():
    data, _ = generate(SMALL_NET, 12, 3)
    stats = fit_normalization(data.inputs(), np.arange(12), data.tau)
    return PowerRDN(TINY, random_params(TINY, 30), stats)


def test_checkpoint_round_trip(small_model, tmp_path):
    path = tmp_path / "m.cfnn"
    small_model.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"CFNN"
    back = PowerRDN.load(path)
    assert back.to_bytes() == raw
    assert back.cfg == TINY
    assert len(raw) == 30 + 8 * (count_parameters(TINY)[2] + 2 * TINY.M + 1)


def test_checkpoint_rejects_bad_input(small_model):
    raw = small_model.to_bytes()
    with pytest.raises(ValueError):
        PowerRDN.from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        PowerRDN.from_bytes(raw + b"\0")


def test_predict_one_matches_batched(small_model, backend):
    r = drop_network(SMALL_NET, 40)
    x = build_input(r)
    assert np.allclose(small_model.predict_one(x, backend), small_model.predict(x), rtol=1e-12)


def test_refined_filters_beat_random(small_model):
    r = drop_network(SMALL_NET, 41)
    p_hat, t, _ = predict_and_refine(small_model, r, 200)
    f = build_quadratic_forms(r)
    rng = np.random.default_rng(0)
    u = rng.standard_normal((r.M, 1000))
    u /= np.linalg.norm(u, axis=0)
    for k in range(r.K):
        best = filter_sinr(k, t[:, k], p_hat, f, r.rho)
        assert best >= filter_sinr(k, u, p_hat, f, r.rho).max() - 1e-9 * best


def test_exact_labels_reproduce_solver_rates(small_model, monkeypatch):
    r = drop_network(SMALL_NET, 42)
    res = solve_alternating(r)
    monkeypatch.setattr(PowerRDN, "predict_one", lambda self, x, backend=None: res.p)
    _, _, rates = predict_and_refine(small_model, r, 200)
    assert np.allclose(rates, net_se(res.rates, r.tau, 200), rtol=0, atol=1e-9)


def test_predict_rejects_wrong_geometry(small_model):
    with pytest.raises(ValueError):
        predict_and_refine(small_model, drop_network(NetworkConfig(M=7, K=4, tau=2), 0), 200)
