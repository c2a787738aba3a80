"""Autonomous nonlinear systems and fixed-step RK4 integration."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from ._backend import njit
from .errors import ConfigurationError, DivergenceError

__all__ = [
    "Box", "DynamicalSystem", "TimeGrid", "Trajectory", "builtin_system",
    "integrate_rk4", "integrate_linear_filter", "simulate", "save_trajectory_csv",
    "load_trajectory_csv", "BUILTIN_SYSTEMS",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]`` in state space."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigurationError(f"box bounds shape mismatch {lo.shape} vs {hi.shape}")
        if np.any(hi <= lo):
            raise ConfigurationError("box is degenerate (hi <= lo in some dimension)")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, dim, half_width=1.0):
        return cls(-half_width * np.ones(dim), half_width * np.ones(dim))

    @property
    def dim(self):
        return self.lo.shape[0]

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def distance(self, x):
        """Euclidean distance from ``x`` (``(..., n)``) to the box: norm of the clamp residual."""
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - np.clip(x, self.lo, self.hi), axis=-1)

    def grid_points(self, per_dim=5):
        axes = [np.linspace(l, h, per_dim) for l, h in zip(self.lo, self.hi)]
        return np.array(list(itertools.product(*axes)))

    def to_list(self):
        return [self.lo.tolist(), self.hi.tolist()]


@dataclass(frozen=True)
class DynamicalSystem:
    """``x' = f(x), y = h(x)``.

    ``f`` and ``h`` must broadcast over leading axes (``(..., n_x)`` in).
    ``f_jit`` is an optional numba kernel ``f_jit(x, out)`` on one state,
    used by the compiled integrator.
    """

    name: str
    state_dim: int
    output_dim: int
    f: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    box: Optional[Box] = None
    f_jit: Optional[Callable] = field(default=None, compare=False, repr=False)

    def output_bound(self, box: Optional[Box] = None) -> float:
        """Largest output norm over a grid of the box (corners included)."""
        box = box or self.box
        if box is None:
            return np.inf
        return float(np.max(np.linalg.norm(self.h(box.grid_points(5)), axis=-1)))


# --- builtin vector fields ---------------------------------------------------

ROSSLER_A, ROSSLER_B, ROSSLER_C = 0.2, 0.2, 5.7


def _duffing_f(x):
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 1] ** 3, -x[..., 0]], axis=-1)


def _duffing_h(x):
    return np.asarray(x, dtype=float)[..., 0:1]


@njit
def _duffing_f_jit(x, out):
    out[0] = x[1] * x[1] * x[1]
    out[1] = -x[0]


def _rossler_f(x):
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([-x2 - x3, x1 + ROSSLER_A * x2, ROSSLER_B + x3 * (x1 - ROSSLER_C)], axis=-1)


def _rossler_h(x):
    return np.asarray(x, dtype=float)[..., 1:2]


@njit
def _rossler_f_jit(x, out):
    out[0] = -x[1] - x[2]
    out[1] = x[0] + 0.2 * x[1]
    out[2] = 0.2 + x[2] * (x[0] - 5.7)


def _linear_f(x):
    return -np.asarray(x, dtype=float)


def _identity_h(x):
    return np.asarray(x, dtype=float)


@njit
def _linear_f_jit(x, out):
    out[0] = -x[0]


def builtin_system(name: str) -> DynamicalSystem:
    """Return one of the builtin systems.

    ``reverse_duffing``: x1' = x2^3, x2' = -x1, y = x1, box [-1, 1]^2.
    ``rossler``: a = b = 0.2, c = 5.7, y = x2, box [-1, 1]^3.
    ``scalar_linear``: x' = -x, y = x.  Its admissible box is [-1e4, 1e4] so
    that backward clamping leaves the closed-form transformation T(x) = x
    (for A = [-2], B = [1]) intact to ~5e-5 on [-1, 1].
    """
    if name == "reverse_duffing":
        return DynamicalSystem(name, 2, 1, _duffing_f, _duffing_h, Box.cube(2), _duffing_f_jit)
    if name == "rossler":
        return DynamicalSystem(name, 3, 1, _rossler_f, _rossler_h, Box.cube(3), _rossler_f_jit)
    if name == "scalar_linear":
        return DynamicalSystem(name, 1, 1, _linear_f, _identity_h, Box.cube(1, 1e4), _linear_f_jit)
    raise ConfigurationError(f"unknown system {name!r}; expected one of {sorted(BUILTIN_SYSTEMS)}",
                             path="system")


BUILTIN_SYSTEMS = ("reverse_duffing", "rossler", "scalar_linear")


# --- time grids and trajectories ---------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    dt: float = 0.01
    direction: str = "forward"

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive", path="dt")
        if self.direction not in ("forward", "backward"):
            raise ConfigurationError(f"direction must be forward or backward, got {self.direction!r}")
        span = self.t_end - self.t_start
        if span != 0 and (span > 0) != (self.direction == "forward"):
            raise ConfigurationError(f"t_end - t_start = {span} contradicts direction {self.direction}")

    @classmethod
    def horizon(cls, T, dt=0.01):
        return cls(0.0, float(T), dt)

    @property
    def sign(self):
        return 1.0 if self.direction == "forward" else -1.0

    @property
    def n_steps(self):
        return int(round(abs(self.t_end - self.t_start) / self.dt))

    @property
    def sample_count(self):
        return self.n_steps + 1

    @property
    def times(self):
        return self.t_start + self.sign * self.dt * np.arange(self.sample_count)

    def to_dict(self):
        return {"t_start": self.t_start, "t_end": self.t_end, "dt": self.dt, "direction": self.direction}


@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray  # (sample_count, dim)

    @property
    def times(self):
        return self.grid.times

    @property
    def final(self):
        return self.states[-1]


def integrate_rk4(deriv, x0, grid: TimeGrid) -> Trajectory:
    """Classic RK4 for ``x' = deriv(t, x)`` on the grid (negated step when backward)."""
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    n = grid.n_steps
    h = grid.sign * grid.dt
    t0 = grid.t_start
    out = np.empty((n + 1, x.shape[0]))
    out[0] = x
    for k in range(n):
        t = t0 + k * h
        k1 = np.asarray(deriv(t, x), dtype=float)
        k2 = np.asarray(deriv(t + 0.5 * h, x + 0.5 * h * k1), dtype=float)
        k3 = np.asarray(deriv(t + 0.5 * h, x + 0.5 * h * k2), dtype=float)
        k4 = np.asarray(deriv(t + h, x + h * k3), dtype=float)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) > _kernels.DIVERGENCE_LIMIT):
            raise DivergenceError(f"state diverged at time index {k + 1}", index=k + 1)
        out[k + 1] = x
    return Trajectory(grid, out)


def simulate(system: DynamicalSystem, X0, grid: TimeGrid, clamp: Optional[Box] = None,
             process_noise=None, raise_on_divergence=True):
    """Integrate the system from a batch of initial states ``X0`` (``(N, n_x)``).

    ``clamp`` zeroes the vector field outside the given box.  ``process_noise``
    (``(N, n_steps, n_x)``) is added to the vector field and held over each step.
    Returns ``(states, fail)`` with ``states`` of shape ``(N, T, n_x)``; with
    ``raise_on_divergence`` the first failure raises instead.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    if X0.shape[1] != system.state_dim:
        raise ConfigurationError(f"initial state has dim {X0.shape[1]}, expected {system.state_dim}")
    if clamp is None:
        lo = np.full(system.state_dim, -np.inf)
        hi = np.full(system.state_dim, np.inf)
    else:
        lo, hi = clamp.lo, clamp.hi
    h = grid.sign * grid.dt
    states, fail = _kernels.rk4_batch(system.f, system.f_jit, X0, h, grid.n_steps, lo, hi,
                                      clamp is not None, process_noise)
    if raise_on_divergence and np.any(fail >= 0):
        i = int(np.argmax(fail >= 0))
        raise DivergenceError(f"trajectory {i} diverged at time index {fail[i]}",
                              index=int(fail[i]), item=i)
    return states, fail


def integrate_linear_filter(A, B, u, z0, grid: TimeGrid, hold: str = "cubic") -> Trajectory:
    """RK4 on ``z' = Az + Bu(t)`` with ``u`` sampled once per grid point.

    Between samples ``u`` is reconstructed according to ``hold``
    (``"zoh"``, ``"linear"`` or ``"cubic"``; see :func:`kklearn._kernels.midpoints`).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    nz = A.shape[0]
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if A.shape != (nz, nz) or B.shape[0] != nz or z0.shape != (nz,):
        raise ConfigurationError(f"shape mismatch: A {A.shape}, B {B.shape}, z0 {z0.shape}")
    if u.shape != (grid.sample_count, B.shape[1]):
        raise ConfigurationError(f"input has shape {u.shape}, expected {(grid.sample_count, B.shape[1])}")
    if grid.direction != "forward":
        raise ConfigurationError("linear filter integrates forward in time only")
    Z = _kernels.linear_filter(A, B, u[None], z0[None], grid.dt, hold)
    return Trajectory(grid, Z[0])


def save_trajectory_csv(path, traj: Trajectory, prefix="x"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"{prefix}{j + 1}" for j in range(traj.states.shape[1])])
        for t, row in zip(traj.times, traj.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def load_trajectory_csv(path, dt=None) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    step = dt if dt is not None else (abs(t[1] - t[0]) if len(t) > 1 else 1.0)
    direction = "forward" if len(t) < 2 or t[-1] >= t[0] else "backward"
    return Trajectory(TimeGrid(float(t[0]), float(t[-1]), step, direction), data[:, 1:])
