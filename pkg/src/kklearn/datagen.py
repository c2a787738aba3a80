"""Training data: Latin hypercube initial states, burn-in latent initial states,
paired (x, z) trajectories and the regression/physics split."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import qmc

from .dynamics import Box, DynamicalSystem, TimeGrid, builtin_system, simulate
from . import _kernels
from .errors import ConfigurationError

__all__ = [
    "ObserverSpec", "TrajectoryDataset", "latin_hypercube", "burn_in_time",
    "latent_bound", "generate_dataset", "partition_indices", "save_dataset", "load_dataset",
]

# eigenvector matrices worse than this are treated as non-diagonalisable
MAX_EIGVEC_COND = 1e12


@dataclass(frozen=True)
class ObserverSpec:
    """Linear part ``z' = Az + By`` of the observer; A Hurwitz, (A, B) controllable."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        nz = A.shape[0]
        if A.shape != (nz, nz) or B.shape[0] != nz:
            raise ConfigurationError(f"observer shapes A {A.shape}, B {B.shape} are inconsistent",
                                     path="observer")
        eig = np.linalg.eigvals(A)
        if not np.all(eig.real < 0):
            raise ConfigurationError(f"A is not Hurwitz (eigenvalues {eig})", path="observer.A")
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(nz)])
        if np.linalg.matrix_rank(ctrb) < nz:
            raise ConfigurationError("(A, B) is not controllable", path="observer.B")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_z(self):
        return self.A.shape[0]

    @property
    def n_y(self):
        return self.B.shape[1]

    @classmethod
    def default(cls, n_x, n_y=1):
        """A = -diag(1..n_z), B = ones, n_z = n_y (2 n_x + 1)."""
        n_z = n_y * (2 * n_x + 1)
        return cls(-np.diag(np.arange(1.0, n_z + 1)), np.ones((n_z, n_y)))

    def eig_data(self):
        """``(lambda_min, cond(V))`` with lambda_min = min |Re eig(A)|."""
        lam, V = np.linalg.eig(self.A)
        return float(np.min(np.abs(lam.real))), float(np.linalg.cond(V))

    def to_dict(self):
        return {"A": self.A.tolist(), "B": self.B.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["A"], dtype=float), np.array(d["B"], dtype=float))


def latin_hypercube(p: int, box: Box, seed: int) -> np.ndarray:
    """``p`` Latin hypercube samples in ``box``: one per equal-width stratum per dimension."""
    if p < 1:
        raise ConfigurationError("p must be >= 1", path="datagen.p")
    unit = qmc.LatinHypercube(d=box.dim, seed=np.random.default_rng(seed)).random(p)
    return box.lo + unit * (box.hi - box.lo)


def burn_in_time(A, epsilon: float, z_bar: float) -> float:
    """Burn-in time ``min(0, (1/lambda_min) ln(epsilon / (cond(V) z_bar)))``.

    Starting the latent filter this far in the past shrinks the influence of
    an initial latent of norm ``z_bar`` below ``epsilon`` at time 0.
    """
    if not (epsilon > 0 and z_bar > 0):
        raise ConfigurationError("epsilon and z_bar must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    lam, V = np.linalg.eig(A)
    if not np.all(lam.real < 0):
        raise ConfigurationError("A must be Hurwitz")
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > MAX_EIGVEC_COND:
        raise ConfigurationError(
            f"A is numerically non-diagonalisable (cond(V) = {cond:.3g}); choose a different A")
    lam_min = np.min(np.abs(lam.real))
    # already within tolerance: no burn-in (a positive time would run the filter backward)
    return min(float(np.log(epsilon / (cond * z_bar)) / lam_min), 0.0)


def latent_bound(system: DynamicalSystem, spec: ObserverSpec, box: Optional[Box] = None) -> float:
    """Bound on ||T(x)|| from the output bound: cond(V) ||B|| sup||h|| / lambda_min."""
    lam_min, cond = spec.eig_data()
    return cond * np.linalg.norm(spec.B, 2) * system.output_bound(box) / lam_min


def partition_indices(n_samples: int, rule: str = "even_odd", ratio: int = 2):
    """Split sample indices into regression and physics sets.

    ``even_odd``: even indices regress, odd indices carry the PDE residual.
    ``interleave``: every ``ratio``-th index goes to physics, the rest regress.
    """
    idx = np.arange(n_samples)
    if rule == "even_odd":
        return idx[idx % 2 == 0], idx[idx % 2 == 1]
    if rule == "interleave":
        if ratio < 2:
            raise ConfigurationError("interleave ratio must be >= 2", path="datagen.partition_ratio")
        phys = idx % ratio == ratio - 1
        return idx[~phys], idx[phys]
    raise ConfigurationError(f"unknown partition rule {rule!r}", path="datagen.partition")


@dataclass
class TrajectoryDataset:
    grid: TimeGrid
    states: np.ndarray   # (p, tau_s, n_x)
    latents: np.ndarray  # (p, tau_s, n_z)
    regression_idx: np.ndarray
    physics_idx: np.ndarray
    source_system: str
    observer_spec: ObserverSpec
    seed: int = 0
    epsilon: float = 1e-3
    burn_in: float = 0.0
    partition_rule: str = "even_odd"
    box: Optional[Box] = None

    @property
    def p(self):
        return self.states.shape[0]

    @property
    def X(self):
        """Stacked state matrix of shape ``(p n_x, tau_s)``; block row i is trajectory i."""
        p, T, n = self.states.shape
        return self.states.transpose(0, 2, 1).reshape(p * n, T)

    @property
    def Z(self):
        p, T, n = self.latents.shape
        return self.latents.transpose(0, 2, 1).reshape(p * n, T)

    def regression_samples(self):
        """``(x, z)`` pairs at the regression indices of every trajectory."""
        x = self.states[:, self.regression_idx].reshape(-1, self.states.shape[2])
        z = self.latents[:, self.regression_idx].reshape(-1, self.latents.shape[2])
        return x, z

    def physics_samples(self):
        return self.states[:, self.physics_idx].reshape(-1, self.states.shape[2])

    def digest(self):
        """Content hash used to tie trained models to their data."""
        h = hashlib.sha256()
        for a in (self.states, self.latents, self.regression_idx, self.physics_idx):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(self.source_system.encode())
        return h.hexdigest()[:16]


def generate_dataset(system: DynamicalSystem, spec: ObserverSpec, box: Box, p: int,
                     grid: TimeGrid, epsilon: float = 1e-3, seed: int = 0,
                     partition: str = "even_odd", partition_ratio: int = 2) -> TrajectoryDataset:
    """Simulate ``p`` paired state/latent trajectories.

    Latent initial states come from a burn-in: random nonzero seeds in
    [-1, 1]^n_z are started at a negative time and driven by the outputs of
    the backward-integrated state (vector field clamped to the system box),
    so that ``z_0 ~ T(x_0)``.  The burn-in horizon uses a latent norm bound
    that covers both the random seeds and the transformation itself.
    """
    if p < 1:
        raise ConfigurationError("p must be >= 1", path="datagen.p")
    if grid.direction != "forward" or grid.t_start != 0:
        raise ConfigurationError("dataset grid must run forward from 0", path="datagen")
    if system.box is not None and not (np.all(box.lo >= system.box.lo) and np.all(box.hi <= system.box.hi)):
        raise ConfigurationError("sampling box must lie inside the system box", path="datagen.box")
    x0 = latin_hypercube(p, box, seed)

    seeds = np.empty((p, spec.n_z))
    for i in range(p):
        rng = np.random.default_rng([seed, i])
        z = rng.uniform(-1.0, 1.0, spec.n_z)
        while not np.any(z):
            z = rng.uniform(-1.0, 1.0, spec.n_z)
        seeds[i] = z
    z_bar = float(np.max(np.linalg.norm(seeds, axis=1)))
    clamp = system.box if system.box is not None else box
    z_bar_eff = z_bar + latent_bound(system, spec, clamp)
    tau_b = burn_in_time(spec.A, epsilon, z_bar_eff)
    n_b = int(np.ceil(-tau_b / grid.dt - 1e-9))

    if n_b > 0:
        back = TimeGrid(0.0, -n_b * grid.dt, grid.dt, "backward")
        xb, _ = simulate(system, x0, back, clamp=clamp)
        yb = system.h(xb[:, ::-1])  # ordered from tau_b up to 0
        zb = _kernels.linear_filter(spec.A, spec.B, yb, seeds, grid.dt)
        z0 = zb[:, -1]
    else:
        z0 = seeds

    states, _ = simulate(system, x0, grid)
    latents = _kernels.linear_filter(spec.A, spec.B, system.h(states), z0, grid.dt)
    reg, phys = partition_indices(grid.sample_count, partition, partition_ratio)
    return TrajectoryDataset(grid, states, latents, reg, phys, system.name, spec, seed,
                             epsilon, -n_b * grid.dt, partition, box)


def _write_matrix(path, M):
    with open(path, "w") as fh:
        for row in M:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def save_dataset(ds: TrajectoryDataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "system": ds.source_system,
        "spec": ds.observer_spec.to_dict(),
        "grid": ds.grid.to_dict(),
        "p": ds.p,
        "seed": ds.seed,
        "epsilon": ds.epsilon,
        "burn_in": ds.burn_in,
        "partition": {"rule": ds.partition_rule,
                      "regression_idx": ds.regression_idx.tolist(),
                      "physics_idx": ds.physics_idx.tolist()},
        "box": ds.box.to_list() if ds.box is not None else None,
        "n_x": ds.states.shape[2],
        "n_z": ds.latents.shape[2],
        "digest": ds.digest(),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2))
    _write_matrix(d / "X.csv", ds.X)
    _write_matrix(d / "Z.csv", ds.Z)
    return d


def load_dataset(directory) -> TrajectoryDataset:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    X = np.loadtxt(d / "X.csv", delimiter=",", ndmin=2)
    Z = np.loadtxt(d / "Z.csv", delimiter=",", ndmin=2)
    p, n_x, n_z = meta["p"], meta["n_x"], meta["n_z"]
    T = X.shape[1]
    states = X.reshape(p, n_x, T).transpose(0, 2, 1).copy()
    latents = Z.reshape(p, n_z, T).transpose(0, 2, 1).copy()
    box = Box(*meta["box"]) if meta.get("box") else None
    part = meta["partition"]
    return TrajectoryDataset(
        TimeGrid(**meta["grid"]), states, latents,
        np.array(part["regression_idx"], dtype=np.int64), np.array(part["physics_idx"], dtype=np.int64),
        meta["system"], ObserverSpec.from_dict(meta["spec"]), meta["seed"], meta["epsilon"],
        meta["burn_in"], part["rule"], box)
