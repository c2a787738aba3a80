import json

import numpy as np
import pytest

from kklearn.datagen import ObserverSpec
from kklearn.dynamics import Box, TimeGrid, builtin_system, simulate
from kklearn.errors import ConfigurationError
from kklearn.neural import MlpModel, forward, init_model
from kklearn.observer import (NoiseSpec, estimate, estimate_approx_error, estimate_lipschitz, initial_latent,
                              oracle_transform, run_observer, run_observers, save_run_csv, simulate_plants)

from conftest import identity_model


def test_zero_noise_matches_plain_simulation(duffing_setup):
    system, _ = duffing_setup
    X0 = np.array([[0.3, -0.2], [0.9, 0.1]])
    g = TimeGrid.horizon(5.0)
    states, y, fail = simulate_plants(system, X0, g, NoiseSpec())
    ref, _ = simulate(system, X0, g)
    assert np.array_equal(states, ref) and np.array_equal(y, system.h(ref))
    assert np.all(fail == -1)


def test_process_noise_sample_mean(duffing_setup):
    system, _ = duffing_setup
    noise = NoiseSpec(0.1, 0.0, seed=2)
    g = TimeGrid.horizon(50.0)
    rng = np.random.default_rng([2, 0])
    w = rng.normal(size=(g.n_steps, 2)) * 0.1
    assert np.all(np.abs(w.mean(axis=0)) < 3 * 0.1 / np.sqrt(g.n_steps))
    states, _, fail = simulate_plants(system, np.array([[0.5, 0.5]]), g, noise)
    assert fail[0] == -1 and np.all(np.isfinite(states))


def test_noise_is_seeded(duffing_setup):
    system, _ = duffing_setup
    noise = NoiseSpec((0.1, 0.1), 0.1, seed=9, hold=5)
    g = TimeGrid.horizon(3.0)
    a = simulate_plants(system, np.array([[0.5, 0.5]]), g, noise)
    b = simulate_plants(system, np.array([[0.5, 0.5]]), g, noise)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = simulate_plants(system, np.array([[0.5, 0.5]]), g, NoiseSpec((0.1, 0.1), 0.1, seed=10, hold=5))
    assert not np.array_equal(a[1], c[1])


def test_noise_validation():
    with pytest.raises(ConfigurationError):
        NoiseSpec(-0.1, 0.0)
    with pytest.raises(ConfigurationError):
        NoiseSpec(0.1, 0.0, hold=0)


def test_exact_models_track_scalar_state(scalar_setup):
    system, spec = scalar_setup
    I = identity_model()
    g = TimeGrid.horizon(10.0)
    runs, _ = estimate(system, spec, I, I, np.array([[0.7], [-0.4]]), g)
    for r in runs:
        assert np.max(np.abs(r.estimate - r.true_states)) < 1e-4


def test_offset_latent_decays(scalar_setup):
    system, spec = scalar_setup
    I = identity_model()
    g = TimeGrid.horizon(12.0)
    x0 = np.array([[0.5]])
    states, y, _ = simulate_plants(system, x0, g)
    Zh, Xh = run_observers(spec, I, y, g, x0 + 1.0)
    err = np.abs(Zh[0, :, 0] - states[0, :, 0])
    assert np.all(err <= np.exp(-2.0 * g.times) * (1 + 1e-6) + 1e-8)
    assert np.all(np.abs(Xh[0, g.times > 10, 0] - states[0, g.times > 10, 0]) < 1e-3)


def test_zero_output_zero_latent(duffing_setup):
    _, spec = duffing_setup
    Ts = init_model((5, 8, 2), "tanh", 0)
    g = TimeGrid.horizon(2.0)
    z, xh = run_observer(spec, Ts, np.zeros(g.sample_count), g, np.zeros(5))
    assert np.all(z.states == 0)
    np.testing.assert_array_equal(xh.states, np.repeat(forward(Ts, np.zeros((1, 5))), g.sample_count, 0))


def test_latent_contraction(duffing_setup):
    system, spec = duffing_setup
    g = TimeGrid.horizon(8.0)
    _, y, _ = simulate_plants(system, np.array([[0.4, -0.3]]), g, NoiseSpec(0.0, 0.05, seed=1))
    rng = np.random.default_rng(0)
    z1, z2 = rng.normal(size=5), rng.normal(size=5)
    Ts = init_model((5, 4, 2), "tanh", 0)
    a, _ = run_observer(spec, Ts, y[0], g, z1)
    b, _ = run_observer(spec, Ts, y[0], g, z2)
    lam_min, cond = spec.eig_data()
    bound = cond * np.exp(-lam_min * g.times) * np.linalg.norm(z1 - z2)
    assert np.all(np.linalg.norm(a.states - b.states, axis=1) <= 1.01 * bound)


def test_initial_latent():
    assert initial_latent(identity_model(), [0.25])[0] == 0.25


def test_trained_warm_start(scalar_setup, scalar_trained):
    system, spec = scalar_setup
    T, Ts = scalar_trained.T_model, scalar_trained.Tstar_model
    assert np.linalg.norm(initial_latent(T, [0.0])) < 0.1
    g = TimeGrid.horizon(10.0)
    x0 = np.array([[0.8], [-0.6]])
    warm, _ = estimate(system, spec, T, Ts, x0, g)
    cold, _ = estimate(system, spec, T, Ts, x0, g, warm_start=False)
    for w, c in zip(warm, cold):
        assert np.abs(w.estimate - w.true_states).sum() < np.abs(c.estimate - c.true_states).sum()


def test_error_below_fitted_envelope(scalar_setup, scalar_trained):
    system, spec = scalar_setup
    T, Ts = scalar_trained.T_model, scalar_trained.Tstar_model
    g = TimeGrid.horizon(10.0)
    t = g.times
    q = g.sample_count // 4
    for x0 in (0.8, -0.6, 0.3):
        run = estimate(system, spec, T, Ts, [[x0]], g, warm_start=False)[0][0]
        e = np.linalg.norm(run.estimate - run.true_states, axis=1)
        eps_star = estimate_approx_error(Ts, system, spec, points=run.true_states)
        c = -np.polyfit(t[:q], np.log(e[:q]), 1)[0]
        b = np.max((e[:q] - eps_star) * np.exp(c * t[:q]))
        assert c > 0
        assert np.all(e <= b * np.exp(-c * t) + eps_star + 1e-12)


def test_noise_gain_bracket(scalar_setup, scalar_trained):
    system, spec = scalar_setup
    T, Ts = scalar_trained.T_model, scalar_trained.Tstar_model
    g = TimeGrid.horizon(30.0)
    X0 = np.array([[0.5], [-0.5], [0.9]])
    means = []
    for s in (0.05, 0.1):
        runs, fail = estimate(system, spec, T, Ts, X0, g, NoiseSpec(s, s, seed=4))
        assert np.all(fail == -1)
        err = np.array([np.linalg.norm(r.estimate - r.true_states, axis=1) for r in runs])
        assert np.all(np.isfinite(err))
        means.append(err[:, g.times > 10].mean())
    assert means[1] <= 4 * means[0]


def test_oracle_scalar_closed_form(scalar_setup):
    system, spec = scalar_setup
    x = np.linspace(-1, 1, 11)[:, None]
    assert np.max(np.abs(oracle_transform(system, spec, x) - x)) < 1e-4
    assert np.all(oracle_transform(system, spec, np.zeros(1)) == 0)


def test_oracle_origin_duffing(duffing_setup):
    system, spec = duffing_setup
    assert np.all(oracle_transform(system, spec, np.zeros(2)) == 0)


def test_oracle_satisfies_pde(duffing_setup):
    system, spec = duffing_setup
    rng = np.random.default_rng(0)
    X = rng.uniform(-0.6, 0.6, (20, 2))
    h = 1e-4
    fx = system.f(X)
    dT = (oracle_transform(system, spec, X + h * fx, 1e-4) - oracle_transform(system, spec, X - h * fx, 1e-4)) / (2 * h)
    res = dT - oracle_transform(system, spec, X, 1e-4) @ spec.A.T - system.h(X) @ spec.B.T
    assert np.max(np.linalg.norm(res, axis=1)) < 1e-2


def affine(M, c):
    nz = M.shape[1]
    return MlpModel((nz, M.shape[0]), "relu", np.concatenate([M.ravel(), c]), np.zeros(nz), np.ones(nz),
                    np.zeros(M.shape[0]), np.ones(M.shape[0]))


def test_lipschitz_affine_bound():
    M = np.array([[2.0, 1.0, 0.0], [0.0, -1.0, 3.0]])
    smax = np.linalg.svd(M, compute_uv=False)[0]
    box = Box.cube(3)
    small = estimate_lipschitz(affine(M, np.ones(2)), box, 50, seed=1)
    big = estimate_lipschitz(affine(M, np.ones(2)), box, 5000, seed=1)
    assert small <= big <= smax * (1 + 1e-12)
    assert big > 0.9 * smax


def test_lipschitz_constant_model():
    assert estimate_lipschitz(affine(np.zeros((2, 3)), np.ones(2)), Box.cube(3), 100) == 0.0


def test_approx_error(scalar_setup, scalar_trained):
    system, spec = scalar_setup
    box = Box.cube(1)
    assert estimate_approx_error(identity_model(), system, spec, box=box) < 1e-3
    trained = estimate_approx_error(scalar_trained.Tstar_model, system, spec, box=box)
    raw = estimate_approx_error(init_model((1, 50, 50, 1), "relu", 3), system, spec, box=box)
    assert raw > 0.1 and raw > trained
    one = estimate_approx_error(scalar_trained.Tstar_model, system, spec, points=np.zeros((1, 1)))
    assert one == pytest.approx(abs(forward(scalar_trained.Tstar_model, np.zeros(1))[0]))


def test_single_sample_run(scalar_setup, scalar_trained):
    system, spec = scalar_setup
    T, Ts = scalar_trained.T_model, scalar_trained.Tstar_model
    runs, _ = estimate(system, spec, T, Ts, [[0.4]], TimeGrid.horizon(0.0))
    r = runs[0]
    assert r.estimate.shape == (1, 1)
    np.testing.assert_array_equal(r.estimate[0], forward(Ts, r.latent[0]))


def test_run_csv(tmp_path, scalar_setup):
    system, spec = scalar_setup
    I = identity_model()
    noise = NoiseSpec(0.0, 0.01, seed=3)
    run = estimate(system, spec, I, I, [[0.5]], TimeGrid.horizon(0.1), noise)[0][0]
    save_run_csv(tmp_path / "run.csv", run, noise)
    lines = (tmp_path / "run.csv").read_text().splitlines()
    assert lines[0] == "t,x_1,y_1,zhat_1,xhat_1" and len(lines) == 12
    assert json.loads((tmp_path / "run.csv.noise.json").read_text())["sensor_std"] == 0.01
