"""Running the learned observer and checking it against the integral form of T."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import expm

from . import _kernels
from .datagen import ObserverSpec, burn_in_time, latin_hypercube
from .dynamics import Box, DynamicalSystem, TimeGrid, Trajectory, simulate
from .errors import ConfigurationError
from .neural import MlpModel, forward

__all__ = [
    "NoiseSpec", "EstimationRun", "simulate_plant", "simulate_plants", "run_observer",
    "run_observers", "initial_latent", "oracle_transform", "estimate_lipschitz",
    "estimate_approx_error", "estimate", "save_run_csv",
]


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian process noise ``w`` and sensor noise ``v`` (per-draw standard deviations).

    ``w`` is redrawn every ``hold`` integration steps and held in between;
    ``v`` is drawn independently for every output sample.
    """

    process_std: float | tuple = 0.0
    sensor_std: float | tuple = 0.0
    seed: int = 0
    hold: int = 1

    def __post_init__(self):
        if np.any(np.asarray(self.process_std) < 0) or np.any(np.asarray(self.sensor_std) < 0):
            raise ConfigurationError("noise standard deviations must be >= 0", path="evaluation.noise")
        if self.hold < 1:
            raise ConfigurationError("hold must be >= 1 step", path="evaluation.noise.hold")

    @property
    def is_zero(self):
        return not np.any(self.process_std) and not np.any(self.sensor_std)

    def to_dict(self):
        d = asdict(self)
        for k in ("process_std", "sensor_std"):
            d[k] = np.asarray(d[k], dtype=float).tolist()
        return d


@dataclass
class EstimationRun:
    grid: TimeGrid
    true_states: np.ndarray  # (T, n_x)
    measured: np.ndarray     # (T, n_y)
    latent: np.ndarray       # (T, n_z)
    estimate: np.ndarray     # (T, n_x)

    @property
    def true_traj(self):
        return Trajectory(self.grid, self.true_states)

    @property
    def latent_traj(self):
        return Trajectory(self.grid, self.latent)

    @property
    def estimate_traj(self):
        return Trajectory(self.grid, self.estimate)


def simulate_plants(system: DynamicalSystem, X0, grid: TimeGrid, noise: Optional[NoiseSpec] = None,
                    raise_on_divergence=True):
    """Batched ``x' = f(x) + w, y = h(x) + v``; run ``i`` draws its noise from ``(seed, i)``.

    Returns ``(states, outputs, fail)``.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    N, n_x = X0.shape
    W = None
    V = None
    if noise is not None and not noise.is_zero:
        n_steps = grid.n_steps
        n_draw = -(-n_steps // noise.hold) if n_steps else 0
        W = np.zeros((N, n_steps, n_x))
        V = np.zeros((N, grid.sample_count, system.output_dim))
        for i in range(N):
            rng = np.random.default_rng([noise.seed, i])
            w = rng.normal(size=(n_draw, n_x)) * np.asarray(noise.process_std, dtype=float)
            W[i] = np.repeat(w, noise.hold, axis=0)[:n_steps]
            V[i] = rng.normal(size=(grid.sample_count, system.output_dim)) * np.asarray(noise.sensor_std, dtype=float)
        if not np.any(noise.process_std):
            W = None
    states, fail = simulate(system, X0, grid, process_noise=W, raise_on_divergence=raise_on_divergence)
    with np.errstate(invalid="ignore"):
        y = system.h(states)
    if V is not None:
        y = y + V
    return states, y, fail


def simulate_plant(system, x0, grid, noise: Optional[NoiseSpec] = None):
    """Single-run :func:`simulate_plants`: ``(Trajectory, outputs)``."""
    states, y, _ = simulate_plants(system, np.atleast_1d(x0)[None], grid, noise)
    return Trajectory(grid, states[0]), y[0]


def run_observers(spec: ObserverSpec, Tstar_model: MlpModel, Y, grid: TimeGrid, Z0, hold="cubic"):
    """Batched observer: latent filter driven by outputs ``Y`` (``(N, T, n_y)``), then ``x = T*(z)``."""
    Y = np.asarray(Y, dtype=float)
    Z0 = np.atleast_2d(np.asarray(Z0, dtype=float))
    if Y.ndim != 3 or Y.shape[1] != grid.sample_count or Y.shape[2] != spec.n_y:
        raise ConfigurationError(f"outputs have shape {Y.shape}, expected (N, {grid.sample_count}, {spec.n_y})")
    if Z0.shape != (Y.shape[0], spec.n_z):
        raise ConfigurationError(f"z0 has shape {Z0.shape}, expected {(Y.shape[0], spec.n_z)}")
    if Tstar_model.in_dim != spec.n_z:
        raise ConfigurationError("left-inverse model input dim does not match n_z")
    Zh = _kernels.linear_filter(spec.A, spec.B, Y, Z0, grid.dt, hold)
    N, T, nz = Zh.shape
    Xh = forward(Tstar_model, Zh.reshape(N * T, nz)).reshape(N, T, -1)
    return Zh, Xh


def run_observer(spec, Tstar_model, y, grid, z0, hold="cubic"):
    """Single run: ``(latent Trajectory, estimate Trajectory)``."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    Zh, Xh = run_observers(spec, Tstar_model, y[None], grid, np.atleast_1d(z0)[None], hold)
    return Trajectory(grid, Zh[0]), Trajectory(grid, Xh[0])


def initial_latent(T_model: MlpModel, x0_guess) -> np.ndarray:
    """Warm start ``z0 = T(x0_guess)``."""
    return forward(T_model, np.asarray(x0_guess, dtype=float))


def estimate(system, spec, T_model, Tstar_model, X0, grid, noise=None, warm_start=True,
             raise_on_divergence=True):
    """Simulate plants from ``X0`` and run warm- (or cold-) started observers on them.

    Returns ``(runs, fail)``; diverged plants yield ``None`` entries.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    states, Y, fail = simulate_plants(system, X0, grid, noise, raise_on_divergence)
    ok = fail < 0
    runs = [None] * X0.shape[0]
    if ok.any():
        Z0 = forward(T_model, X0[ok]) if warm_start else np.zeros((int(ok.sum()), spec.n_z))
        Zh, Xh = run_observers(spec, Tstar_model, Y[ok], grid, Z0)
        for j, i in enumerate(np.flatnonzero(ok)):
            runs[i] = EstimationRun(grid, states[i], Y[i], Zh[j], Xh[j])
    return runs, fail


def oracle_transform(system: DynamicalSystem, spec: ObserverSpec, x, epsilon=1e-6, dt=0.01):
    """Transformation value by quadrature of ``int_{-inf}^0 exp(-A s) B h(x(s; x)) ds``.

    The state is integrated backward with its vector field switched off
    outside the system box, which keeps ``h`` bounded by ``sup ||h||`` on the
    box; the integral is truncated where that bound makes the tail smaller than
    ``epsilon`` and evaluated with the trapezoid rule on the RK4 samples.
    Accepts one state or a batch ``(N, n_x)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    lam_min, _ = spec.eig_data()
    y_bar = system.output_bound()
    if not np.isfinite(y_bar):
        raise ConfigurationError("oracle needs a bounded system box")
    z_bar = max(np.linalg.norm(spec.B, 2) * y_bar / lam_min, 1e-300)
    tau_b = min(burn_in_time(spec.A, epsilon, z_bar), 0.0)
    n_b = int(np.ceil(-tau_b / dt - 1e-9))
    if n_b == 0:
        out = np.zeros((X.shape[0], spec.n_z))
        return out[0] if single else out
    back = TimeGrid(0.0, -n_b * dt, dt, "backward")
    xb, _ = simulate(system, X, back, clamp=system.box)
    yb = system.h(xb)  # (N, n_b + 1, n_y), sample k at s = -k dt
    step = expm(spec.A * dt)
    E = np.empty((n_b + 1, spec.n_z, spec.n_y))
    E[0] = spec.B
    for k in range(n_b):
        E[k + 1] = step @ E[k]
    w = np.full(n_b + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    out = np.einsum("k,kzm,nkm->nz", w, E, yb)
    return out[0] if single else out


def estimate_lipschitz(Tstar_model: MlpModel, latent_box: Box, n_pairs: int, seed: int = 0) -> float:
    """Largest difference quotient of the left inverse over random pairs in ``latent_box``.

    A lower bound on the Lipschitz constant.  Pairs are generated sequentially
    from the seed, so a larger ``n_pairs`` evaluates a superset.
    """
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=(n_pairs, 2, latent_box.dim))
    Z = latent_box.lo + u * (latent_box.hi - latent_box.lo)
    a = forward(Tstar_model, Z[:, 0])
    b = forward(Tstar_model, Z[:, 1])
    dz = np.linalg.norm(Z[:, 0] - Z[:, 1], axis=1)
    keep = dz > 0
    if not keep.any():
        return 0.0
    return float(np.max(np.linalg.norm(a - b, axis=1)[keep] / dz[keep]))


def estimate_approx_error(Tstar_model, system, spec, probes=100, seed=0, box: Optional[Box] = None,
                          epsilon=1e-6, dt=0.01, points=None) -> float:
    """``max ||x - T*(T_oracle(x))||`` over probe states (Latin hypercube in the box, or ``points``)."""
    if points is None:
        box = box or system.box
        points = latin_hypercube(probes, box, seed)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    z = oracle_transform(system, spec, points, epsilon, dt)
    return float(np.max(np.linalg.norm(points - forward(Tstar_model, z), axis=1)))


def save_run_csv(path, run: EstimationRun, noise: Optional[NoiseSpec] = None):
    """CSV ``t, x_1.., y_1.., zhat_1.., xhat_1..``; the noise spec goes to ``<path>.noise.json``."""
    nx, ny, nz = run.true_states.shape[1], run.measured.shape[1], run.latent.shape[1]
    header = (["t"] + [f"x_{j + 1}" for j in range(nx)] + [f"y_{j + 1}" for j in range(ny)]
              + [f"zhat_{j + 1}" for j in range(nz)] + [f"xhat_{j + 1}" for j in range(nx)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, t in enumerate(run.grid.times):
            row = np.concatenate([[t], run.true_states[k], run.measured[k], run.latent[k], run.estimate[k]])
            w.writerow([repr(float(v)) for v in row])
    if noise is not None:
        Path(str(path) + ".noise.json").write_text(json.dumps(noise.to_dict(), indent=2))
