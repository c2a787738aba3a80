"""Normalised estimation errors, error variances and the empirical generalisation gap."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .datagen import ObserverSpec, TrajectoryDataset
from .dynamics import Box, DynamicalSystem, TimeGrid
from .errors import ConfigurationError, DivergenceError
from .observer import EstimationRun, NoiseSpec, estimate
from .training import TrainedPair, TrainingConfig, train

__all__ = [
    "NORM_FLOOR", "normalized_error_trace", "mean_error_variance", "error_envelope",
    "ring_points", "outside_points", "GeneralizationSweep", "generalization_sweep",
    "EvalProtocol", "MethodResult", "compare_methods", "write_sweep_csv", "write_envelope_csv",
    "write_report",
]

NORM_FLOOR = 1e-9


def normalized_error_trace(run: EstimationRun):
    """``e(t_k) = ||xhat - x|| / ||x||``.

    Returns ``(e, flagged)``; samples with ``||x|| <= 1e-9`` are flagged and
    carry NaN instead of a quotient.
    """
    num = np.linalg.norm(run.estimate - run.true_states, axis=1)
    den = np.linalg.norm(run.true_states, axis=1)
    flagged = den <= NORM_FLOOR
    e = np.full(num.shape, np.nan)
    np.divide(num, den, out=e, where=~flagged)
    return e, flagged


def mean_error_variance(runs: Sequence[EstimationRun]) -> float:
    """Mean over runs of the time-mean of squared normalised errors.

    Flagged samples are skipped; a run with no usable sample (a state resting
    at the origin) is skipped as a whole.
    """
    if len(runs) == 0:
        raise ConfigurationError("need at least one run")
    per_run = []
    for r in runs:
        e, flagged = normalized_error_trace(r)
        if not flagged.all():
            per_run.append(np.mean(e[~flagged] ** 2))
    if not per_run:
        raise ConfigurationError("every run has a degenerate state norm at every sample")
    return float(np.mean(per_run))


def error_envelope(runs: Sequence[EstimationRun]):
    """Per-time ``(min, mean, max)`` of the normalised error over an ensemble."""
    E = np.array([normalized_error_trace(r)[0] for r in runs])
    return np.nanmin(E, axis=0), np.nanmean(E, axis=0), np.nanmax(E, axis=0)


def _ray_exit(u, w, delta):
    """Smallest s > 0 with dist(s u, box of half-widths w) = delta (box centred at 0)."""
    a = np.abs(u)
    act = a > 0
    s_break = np.where(act, w / np.where(act, a, 1.0), np.inf)
    order = np.argsort(s_break)
    for m in range(1, int(act.sum()) + 1):
        S = order[:m]
        A2 = np.sum(a[S] ** 2)
        AW = np.sum(a[S] * w[S])
        W2 = np.sum(w[S] ** 2)
        # A2 s^2 - 2 AW s + W2 - delta^2 = 0, larger root
        disc = AW * AW - A2 * (W2 - delta * delta)
        s = (AW + np.sqrt(max(disc, 0.0))) / A2
        upper = s_break[order[m]] if m < act.sum() else np.inf
        if s_break[order[m - 1]] <= s <= upper:
            return s
    raise ArithmeticError("ray distance solve failed")


def ring_points(box: Box, delta: float, q: int) -> np.ndarray:
    """``q`` points at exact Euclidean distance ``delta`` from ``box``.

    Planar boxes: rays at angles ``2 pi j / q`` from the box centre, each point
    placed along its ray where the distance to the box equals ``delta``.
    One-dimensional boxes alternate between the two sides.
    """
    if not delta > 0:
        raise ConfigurationError("delta must be positive", path="evaluation.deltas")
    if q < 1:
        raise ConfigurationError("q must be >= 1", path="evaluation.q")
    c = box.center
    w = 0.5 * (box.hi - box.lo)
    if box.dim == 1:
        side = np.where(np.arange(q) % 2 == 0, 1.0, -1.0)
        return (c + side * (w + delta))[:, None]
    if box.dim != 2:
        raise ConfigurationError("ring formation is defined for planar systems only; "
                                 "pass explicit test points instead", path="evaluation")
    pts = np.empty((q, 2))
    for j in range(q):
        th = 2.0 * np.pi * j / q
        u = np.array([np.cos(th), np.sin(th)])
        pts[j] = c + _ray_exit(u, w, delta) * u
    return pts


def outside_points(box: Box, n: int, margin: float = 1.0, seed: int = 0) -> np.ndarray:
    """``n`` uniform points in the box grown by ``margin`` but outside ``box`` itself."""
    rng = np.random.default_rng(seed)
    lo, hi = box.lo - margin, box.hi + margin
    out = []
    while len(out) < n:
        p = rng.uniform(lo, hi, size=(4 * n, box.dim))
        p = p[~box.contains(p)]
        out.extend(p[: n - len(out)])
    return np.array(out)


@dataclass
class GeneralizationSweep:
    deltas: np.ndarray
    q: int
    test_points: list
    E_test: np.ndarray
    E_train: float
    G_emp: np.ndarray
    q_effective: np.ndarray
    excluded: np.ndarray

    @property
    def mean_G_emp(self):
        return float(np.nanmean(self.G_emp))


def generalization_sweep(trained: TrainedPair, system: DynamicalSystem, spec: ObserverSpec,
                         box: Box, deltas, q: int, grid: TimeGrid, train_x0=None,
                         points_fn: Optional[Callable] = None) -> GeneralizationSweep:
    """``G_emp(delta) = |E_test(delta) - E_train|`` for each distance ``delta``.

    ``E_train`` uses the training initial states ``train_x0`` with observers
    warm-started at the exact initial state; ``E_test(delta)`` uses warm-started
    runs from ``points_fn(box, delta, q)`` (ring formation by default).  Test
    runs whose true trajectory diverges are excluded and counted.
    """
    deltas = np.asarray(deltas, dtype=float)
    if deltas.size == 0:
        raise ConfigurationError("deltas must not be empty", path="evaluation.deltas")
    if train_x0 is None:
        raise ConfigurationError("training initial states are required for E_train")
    points_fn = points_fn or ring_points
    T, Ts = trained.T_model, trained.Tstar_model
    runs, _ = estimate(system, spec, T, Ts, train_x0, grid)
    E_train = mean_error_variance(runs)
    E_test = np.full(deltas.size, np.nan)
    q_eff = np.zeros(deltas.size, dtype=int)
    excl = np.zeros(deltas.size, dtype=int)
    pts_all = []
    for k, d in enumerate(deltas):
        pts = np.asarray(points_fn(box, float(d), q), dtype=float)
        pts_all.append(pts)
        runs, fail = estimate(system, spec, T, Ts, pts, grid, raise_on_divergence=False)
        good = [r for r in runs if r is not None]
        q_eff[k] = len(good)
        excl[k] = len(runs) - len(good)
        if good:
            E_test[k] = mean_error_variance(good)
    G = np.abs(E_test - E_train)
    return GeneralizationSweep(deltas, q, pts_all, E_test, E_train, G, q_eff, excl)


@dataclass(frozen=True)
class EvalProtocol:
    deltas: tuple = tuple(0.5 * k for k in range(1, 21))
    q: int = 10
    ensemble_size: int = 50
    outside_margin: float = 1.0
    grid: TimeGrid = field(default_factory=lambda: TimeGrid.horizon(20.0))
    noise: Optional[NoiseSpec] = None
    seed: int = 0


@dataclass
class MethodResult:
    method: str
    trained: TrainedPair
    traces: np.ndarray      # (ensemble, T) normalised errors
    envelope: tuple         # (min, mean, max)
    sweep: Optional[GeneralizationSweep]


def compare_methods(dataset: TrajectoryDataset, system: DynamicalSystem, spec: ObserverSpec,
                    configs, protocol: EvalProtocol, pretrained: Optional[dict] = None,
                    box: Optional[Box] = None) -> dict:
    """Train every configuration (or take ``pretrained[name]``) and evaluate all on one protocol.

    ``configs`` maps a label to a :class:`TrainingConfig`.  Every label sees the
    same dataset, the same outside-region ensemble and the same sweep points.
    Returns ``{label: MethodResult}``.
    """
    box = box or dataset.box or system.box
    X_out = outside_points(box, protocol.ensemble_size, protocol.outside_margin, protocol.seed)
    train_x0 = dataset.states[:, 0]
    results = {}
    for label, cfg in configs.items():
        try:
            pair = (pretrained or {}).get(label) or train(dataset, system, spec, cfg)
            runs, _ = estimate(system, spec, pair.T_model, pair.Tstar_model, X_out, protocol.grid,
                               protocol.noise, raise_on_divergence=False)
            good = [r for r in runs if r is not None]
            traces = np.array([normalized_error_trace(r)[0] for r in good])
            sweep = None
            if protocol.deltas:
                sweep = generalization_sweep(pair, system, spec, box, protocol.deltas, protocol.q,
                                             protocol.grid, train_x0)
        except (DivergenceError, ConfigurationError) as exc:
            raise type(exc)(f"[{label}] {exc}") from exc
        results[label] = MethodResult(label, pair, traces, error_envelope(good), sweep)
    return results


def write_sweep_csv(path, sweep: GeneralizationSweep):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "E_test", "G_emp", "q_effective"])
        for d, e, g, qe in zip(sweep.deltas, sweep.E_test, sweep.G_emp, sweep.q_effective):
            w.writerow([repr(float(d)), repr(float(e)), repr(float(g)), int(qe)])


def write_envelope_csv(path, grid: TimeGrid, envelope):
    lo, mean, hi = envelope
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "min", "mean", "max"])
        for row in zip(grid.times, lo, mean, hi):
            w.writerow([repr(float(v)) for v in row])


def write_report(directory, results: dict, protocol: EvalProtocol, extra=None) -> Path:
    """Per-method ``gen_sweep.csv`` and ``ensemble_errors.csv`` plus a top-level ``report.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    summary = {"methods": {}, "protocol": {"deltas": list(protocol.deltas), "q": protocol.q,
                                           "ensemble_size": protocol.ensemble_size,
                                           "grid": protocol.grid.to_dict(), "seed": protocol.seed}}
    for label, res in results.items():
        sub = d / label
        sub.mkdir(exist_ok=True)
        write_envelope_csv(sub / "ensemble_errors.csv", protocol.grid, res.envelope)
        entry = {"method": res.trained.config.method,
                 "ensemble_runs": int(res.traces.shape[0]),
                 "mean_error": float(np.nanmean(res.traces)) if res.traces.size else None}
        if res.sweep is not None:
            write_sweep_csv(sub / "gen_sweep.csv", res.sweep)
            entry.update({"E_train": res.sweep.E_train, "mean_G_emp": res.sweep.mean_G_emp,
                          "G_emp": res.sweep.G_emp.tolist()})
        summary["methods"][label] = entry
    if extra:
        summary.update(extra)
    (d / "report.json").write_text(json.dumps(summary, indent=2))
    return d
