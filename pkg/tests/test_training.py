import numpy as np
import pytest

from kklearn.datagen import ObserverSpec
from kklearn.dynamics import DynamicalSystem
from kklearn.errors import ConfigurationError
from kklearn.neural import MlpModel, forward, init_model, fit_normalization
from kklearn.training import (TrainingConfig, load_trained, loss_ae, loss_physics, loss_regression,
                              lr_schedule, physics_residual, save_trained, train)

from conftest import identity_model

EPS = 1e-5

def tanh_pair(n_x=2, n_z=3, seed=0):
    T = init_model((n_x, 16, 16, 16, n_z), "tanh", seed)
    Ts = init_model((n_z, 16, 16, 16, n_x), "tanh", seed + 1)
    rng = np.random.default_rng(seed)
    T = fit_normalization(T, rng.normal(0, 1.5, (30, n_x)), rng.normal(0.3, 2.0, (30, n_z)))
    Ts = fit_normalization(Ts, rng.normal(0.3, 2.0, (30, n_z)), rng.normal(0, 1.5, (30, n_x)))
    return T, Ts


def fd(model, fn, coords):
    out = []
    for c in coords:
        p = model.params.copy()
        p[c] += EPS
        up = fn(model.with_params(p))
        p[c] -= 2 * EPS
        out.append((up - fn(model.with_params(p))) / (2 * EPS))
    return np.array(out)


def rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


def duffing_like():
    f = lambda x: np.stack([x[..., 1] ** 3, -x[..., 0]], axis=-1)
    return DynamicalSystem("probe", 2, 1, f, lambda x: x[..., :1])


def test_identity_models_have_zero_losses(scalar_setup):
    system, spec = scalar_setup
    I = identity_model()
    x = np.linspace(-1, 1, 9)[:, None]
    loss, gt, gs = loss_regression(I, I, x, x, 1.0)
    assert loss == 0 and not gt.any() and not gs.any()
    r, _ = physics_residual(I, system, spec, x)
    assert np.all(r == 0)
    assert loss_physics(I, system, spec, x)[0] == 0
    rec, gt, gs = loss_ae(I, I, system, spec, x, 0.5)
    assert rec == 0 and not gt.any() and not gs.any()


def test_residual_vanishes_at_equilibrium():
    system = duffing_like()
    spec = ObserverSpec.default(2)
    T = init_model((2, 8, 5), "relu", 0)  # zero biases and relu: T(0) = 0
    r, _ = physics_residual(T, system, spec, np.zeros((1, 2)))
    assert np.all(r == 0)


def test_chi_zero_decouples_decoder():
    T, Ts = tanh_pair()
    rng = np.random.default_rng(1)
    x, z = rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    loss, _, g_eta = loss_regression(T, Ts, x, z, 0.0)
    assert np.all(g_eta == 0)
    assert loss == pytest.approx(np.mean(np.sum((forward(T, x) - z) ** 2, axis=1)))


def test_regression_gradient_fd():
    T, Ts = tanh_pair()
    rng = np.random.default_rng(2)
    x, z = rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    _, gt, gs = loss_regression(T, Ts, x, z, 0.7)
    ct = rng.choice(T.params.size, 20, replace=False)
    cs = rng.choice(Ts.params.size, 20, replace=False)
    assert rel(gt[ct], fd(T, lambda m: loss_regression(m, Ts, x, z, 0.7)[0], ct)) < 1e-4
    assert rel(gs[cs], fd(Ts, lambda m: loss_regression(T, m, x, z, 0.7)[0], cs)) < 1e-4


def test_physics_gradient_fd():
    system, spec = duffing_like(), ObserverSpec.default(2)
    T, _ = tanh_pair(n_z=5)
    x = np.random.default_rng(3).uniform(-1, 1, (8, 2))
    _, g = loss_physics(T, system, spec, x)
    c = np.random.default_rng(4).choice(T.params.size, 20, replace=False)
    assert rel(g[c], fd(T, lambda m: loss_physics(m, system, spec, x)[0], c)) < 1e-4


def test_composite_gradient_fd():
    system, spec = duffing_like(), ObserverSpec.default(2)
    T, Ts = tanh_pair(n_z=5)
    rng = np.random.default_rng(5)
    x, z, xp = rng.uniform(-1, 1, (6, 2)), rng.normal(size=(6, 5)), rng.uniform(-1, 1, (6, 2))
    lam = 0.5

    def obj(m):
        return loss_regression(m, Ts, x, z, 1.0)[0] + lam * loss_physics(m, system, spec, xp)[0]

    g = loss_regression(T, Ts, x, z, 1.0)[1] + lam * loss_physics(T, system, spec, xp)[1]
    c = rng.choice(T.params.size, 20, replace=False)
    assert rel(g[c], fd(T, obj, c)) < 1e-4


def test_ae_loss_ignores_encoding_when_lambda_zero(scalar_setup):
    system, spec = scalar_setup
    # encoder doubles, decoder halves: perfect reconstruction with the wrong latent
    T = MlpModel((1, 1), "relu", np.array([2.0, 0.0]), [0.0], [1.0], [0.0], [1.0])
    Ts = MlpModel((1, 1), "relu", np.array([0.5, 0.0]), [0.0], [1.0], [0.0], [1.0])
    x = np.linspace(-1, 1, 7)[:, None]
    assert loss_ae(T, Ts, system, spec, x, 0.0)[0] == 0
    assert loss_ae(T, Ts, system, spec, x, 1.0)[0] > 0


def test_gradients_sum_over_batch():
    T, Ts = tanh_pair()
    rng = np.random.default_rng(6)
    x, z = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    whole = loss_regression(T, Ts, x, z, 1.0)[1]
    parts = sum(loss_regression(T, Ts, x[i:i + 1], z[i:i + 1], 1.0)[1] for i in range(4)) / 4
    np.testing.assert_allclose(whole, parts, atol=1e-12)


def test_lr_schedule():
    base = TrainingConfig(learning_rate=1.0)
    assert lr_schedule(777, base) == 1.0
    cfg = TrainingConfig(learning_rate=1.0, lr_decay=0.5, decay_interval=100)
    assert lr_schedule(250, cfg) == 0.25
    assert lr_schedule(0, cfg) == 1.0


def test_config_validation():
    with pytest.raises(ConfigurationError) as ei:
        TrainingConfig(method="gan")
    assert ei.value.path == "training.method"
    with pytest.raises(ConfigurationError):
        TrainingConfig(lam=-1)


def test_scalar_benchmark(scalar_trained, scalar_setup):
    system, spec = scalar_setup
    xs = np.linspace(-1, 1, 201)[:, None]
    h = scalar_trained.history
    assert h["total"][-100:].mean() < 1e-3
    assert np.max(np.abs(forward(scalar_trained.T_model, xs) - xs)) < 0.05
    assert np.max(np.abs(forward(scalar_trained.Tstar_model, xs) - xs)) < 0.05
    r, _ = physics_residual(scalar_trained.T_model, system, spec, xs)
    assert np.mean(r ** 2) < 1e-3


def test_loss_trend_is_decreasing(scalar_trained):
    blocks = scalar_trained.history["total"].reshape(-1, 100).mean(axis=1)
    assert np.all(blocks[1:] <= 1.25 * blocks[:-1])
    assert blocks[-1] < 1e-3 * blocks[0]


def test_supervised_never_evaluates_residual(scalar_setup, scalar_dataset):
    system, spec = scalar_setup
    cfg = TrainingConfig(method="supervised_nn", epochs=1, steps_per_epoch=20, hidden=(8,))
    pr = train(scalar_dataset, system, spec, cfg)
    assert np.all(np.isnan(pr.history["physics_residual"]))
    assert np.all(np.isfinite(pr.history["total"]))


def test_zero_epochs_returns_initial_models(scalar_setup, scalar_dataset):
    system, spec = scalar_setup
    from kklearn.training import initial_models
    cfg = TrainingConfig(epochs=0, hidden=(8,))
    T0, Ts0 = initial_models(scalar_dataset, cfg)
    pr = train(scalar_dataset, system, spec, cfg)
    assert np.array_equal(pr.T_model.params, T0.params) and np.array_equal(pr.Tstar_model.params, Ts0.params)
    assert pr.history["total"].size == 0


@pytest.mark.parametrize("method", ["pinn", "unsupervised_ae"])
def test_seed_determinism(scalar_setup, scalar_dataset, method):
    system, spec = scalar_setup
    cfg = TrainingConfig(method=method, epochs=2, steps_per_epoch=30, hidden=(8, 8), seed=11)
    a = train(scalar_dataset, system, spec, cfg)
    b = train(scalar_dataset, system, spec, cfg)
    for k in a.history:
        assert np.array_equal(a.history[k], b.history[k], equal_nan=True)
    assert np.array_equal(a.T_model.params, b.T_model.params)


def test_pinn_without_residual_matches_supervised(scalar_setup, scalar_dataset):
    system, spec = scalar_setup
    kw = dict(epochs=2, steps_per_epoch=40, hidden=(8, 8), seed=3)
    a = train(scalar_dataset, system, spec, TrainingConfig(method="pinn", lam=0.0, **kw))
    b = train(scalar_dataset, system, spec, TrainingConfig(method="supervised_nn", **kw))
    for k in a.history:
        assert np.array_equal(a.history[k], b.history[k], equal_nan=True)
    assert np.array_equal(a.T_model.params, b.T_model.params)
    assert np.array_equal(a.Tstar_model.params, b.Tstar_model.params)


def test_ae_trains_without_latents(scalar_setup, scalar_dataset):
    system, spec = scalar_setup
    cfg = TrainingConfig(method="unsupervised_ae", epochs=1, steps_per_epoch=50, hidden=(8,))
    pr = train(scalar_dataset, system, spec, cfg)
    assert np.all(np.isfinite(pr.history["physics_residual"]))
    # the encoder output scale is not fitted to the latents
    assert np.all(pr.T_model.out_std == 1.0)


def test_trained_round_trip(tmp_path, scalar_trained):
    save_trained(scalar_trained, tmp_path / "m")
    back = load_trained(tmp_path / "m")
    assert np.array_equal(back.T_model.params, scalar_trained.T_model.params)
    assert back.config == scalar_trained.config
    for k in ("regression_loss", "total", "lr"):
        assert np.array_equal(back.history[k], scalar_trained.history[k])
    assert (tmp_path / "m" / "loss_history.csv").read_text().splitlines()[0] == \
        "step,regression_loss,physics_residual,total,lr"
