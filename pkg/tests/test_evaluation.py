import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kklearn.dynamics import Box, TimeGrid
from kklearn.errors import ConfigurationError
from kklearn.evaluation import (EvalProtocol, compare_methods, error_envelope, generalization_sweep,
                                mean_error_variance, normalized_error_trace, outside_points, ring_points,
                                write_report)
from kklearn.observer import EstimationRun
from kklearn.training import TrainedPair, TrainingConfig

from conftest import identity_model

G = TimeGrid(0.0, 0.4, 0.1)


def make_run(x, xhat):
    x = np.asarray(x, float).reshape(len(x), -1)
    xhat = np.asarray(xhat, float).reshape(len(xhat), -1)
    return EstimationRun(TimeGrid(0.0, 0.1 * (len(x) - 1), 0.1), x, x[:, :1], x, xhat)


def exact_pair(method="pinn"):
    I = identity_model()
    return TrainedPair(I, I, TrainingConfig(method=method))


def test_error_trace_cases():
    x = np.array([[1.0, 2.0], [-3.0, 0.5], [0.2, 0.2]])
    e, flagged = normalized_error_trace(make_run(x, x))
    assert np.all(e == 0) and not flagged.any()
    e, _ = normalized_error_trace(make_run(x, 2 * x))
    np.testing.assert_allclose(e, 1.0)


def test_degenerate_norm_flagged():
    e, flagged = normalized_error_trace(make_run([[0.0], [1.0]], [[0.1], [1.1]]))
    assert flagged.tolist() == [True, False] and np.isnan(e[0])
    assert mean_error_variance([make_run([[0.0], [1.0]], [[0.1], [1.1]])]) == pytest.approx(0.01)


def test_mean_error_variance_examples():
    x = np.ones((5, 1))
    assert mean_error_variance([make_run(x, x)]) == 0
    assert mean_error_variance([make_run(x, 1.1 * x)]) == pytest.approx(0.01)
    runs = [make_run(x, x * (1 + np.sqrt(0.01))), make_run(x, x * (1 + np.sqrt(0.03)))]
    assert mean_error_variance(runs) == pytest.approx(0.02)


def test_mean_error_variance_symmetries():
    rng = np.random.default_rng(0)
    runs = [make_run(rng.normal(size=(6, 2)), rng.normal(size=(6, 2))) for _ in range(4)]
    base = mean_error_variance(runs)
    assert mean_error_variance(runs[::-1]) == pytest.approx(base, rel=1e-14)
    flipped = [make_run(r.true_states[::-1], r.estimate[::-1]) for r in runs]
    assert mean_error_variance(flipped) == pytest.approx(base, rel=1e-14)


def test_envelope():
    x = np.ones((3, 1))
    lo, mean, hi = error_envelope([make_run(x, x), make_run(x, 1.5 * x)])
    np.testing.assert_allclose(lo, 0)
    np.testing.assert_allclose(mean, 0.25)
    np.testing.assert_allclose(hi, 0.5)


def test_ring_points_axis():
    pts = ring_points(Box.cube(2), 0.5, 4)
    np.testing.assert_allclose(pts, [[1.5, 0], [0, 1.5], [-1.5, 0], [0, -1.5]], atol=1e-12)


def test_ring_points_diagonal():
    t = 0.7
    pts = ring_points(Box.cube(2), np.sqrt(2) * t, 8)
    np.testing.assert_allclose(pts[1], [1 + t, 1 + t], atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 20.0), st.integers(1, 40), st.floats(0.2, 3.0), st.floats(0.2, 3.0),
       st.floats(-2, 2), st.floats(-2, 2))
def test_ring_points_distance(delta, q, wx, wy, cx, cy):
    b = Box([cx - wx, cy - wy], [cx + wx, cy + wy])
    pts = ring_points(b, delta, q)
    assert pts.shape == (q, 2)
    np.testing.assert_allclose(b.distance(pts), delta, atol=1e-9)


def test_ring_points_guards():
    with pytest.raises(ConfigurationError):
        ring_points(Box.cube(3), 1.0, 4)
    with pytest.raises(ConfigurationError):
        ring_points(Box.cube(2), 0.0, 4)
    np.testing.assert_allclose(ring_points(Box.cube(1), 0.5, 3)[:, 0], [1.5, -1.5, 1.5])


def test_outside_points():
    b = Box.cube(2)
    pts = outside_points(b, 50, 1.0, seed=0)
    assert pts.shape == (50, 2)
    assert not b.contains(pts).any() and np.all(np.abs(pts) <= 2)
    assert np.array_equal(pts, outside_points(b, 50, 1.0, seed=0))


def test_exact_models_generalise(scalar_setup):
    system, spec = scalar_setup
    sw = generalization_sweep(exact_pair(), system, spec, Box.cube(1), [0.5, 1.0, 2.0, 5.0], 4,
                              TimeGrid.horizon(5.0), np.linspace(-1, 1, 7)[:, None])
    assert np.all(sw.G_emp < 1e-4)
    assert np.array_equal(sw.G_emp, np.abs(sw.E_test - sw.E_train))
    assert np.all(sw.q_effective + sw.excluded == 4)


def test_sweep_requires_deltas(scalar_setup):
    system, spec = scalar_setup
    with pytest.raises(ConfigurationError) as ei:
        generalization_sweep(exact_pair(), system, spec, Box.cube(1), [], 4, G, np.zeros((1, 1)) + 0.5)
    assert ei.value.path == "evaluation.deltas"


def test_divergent_points_excluded(duffing_setup):
    from kklearn.dynamics import DynamicalSystem
    from kklearn.datagen import ObserverSpec
    blow = DynamicalSystem("blow", 1, 1, lambda x: x ** 2, lambda x: x)
    spec = ObserverSpec([[-1.0]], [[1.0]])

    def pts(box, d, q):
        return np.array([[-0.5 - d], [1.0 + d]])

    sw = generalization_sweep(exact_pair(), blow, spec, Box.cube(1), [0.5], 2, TimeGrid.horizon(3.0),
                              np.array([[-0.3]]), points_fn=pts)
    assert sw.q_effective[0] == 1 and sw.excluded[0] == 1


def test_compare_with_identical_models(tmp_path, scalar_setup, scalar_dataset):
    system, spec = scalar_setup
    cfgs = {m: TrainingConfig(method=m) for m in ("pinn", "supervised_nn", "unsupervised_ae")}
    pre = {m: exact_pair(m) for m in cfgs}
    prot = EvalProtocol(deltas=(0.5, 1.0), q=2, ensemble_size=1, grid=TimeGrid.horizon(2.0))
    res = compare_methods(scalar_dataset, system, spec, cfgs, prot, pretrained=pre, box=Box.cube(1))
    traces = [res[m].traces for m in cfgs]
    assert all(np.array_equal(traces[0], t) for t in traces[1:])
    write_report(tmp_path / "rep", res, prot)
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert set(rep["methods"]) == set(cfgs)
    assert all("mean_G_emp" in v for v in rep["methods"].values())
    for m in cfgs:
        assert (tmp_path / "rep" / m / "gen_sweep.csv").exists()
        assert (tmp_path / "rep" / m / "ensemble_errors.csv").exists()


def test_ensemble_size(scalar_setup, scalar_dataset):
    system, spec = scalar_setup
    prot = EvalProtocol(deltas=(), ensemble_size=50, grid=TimeGrid.horizon(1.0))
    res = compare_methods(scalar_dataset, system, spec, {"pinn": TrainingConfig()}, prot,
                          pretrained={"pinn": exact_pair()}, box=Box.cube(1))
    assert res["pinn"].traces.shape == (50, 101)
    assert res["pinn"].sweep is None


def test_resting_run_skipped():
    z = np.zeros((3, 1))
    assert mean_error_variance([make_run(z, z + 0.1), make_run(np.ones((3, 1)), 1.1 * np.ones((3, 1)))]) == \
        pytest.approx(0.01)
    with pytest.raises(ConfigurationError):
        mean_error_variance([make_run(z, z)])
