"""Physics-informed training of the transformation network and its left inverse.

Three methods share one loop:

* ``pinn``: regression loss on (x, z) pairs plus ``lambda`` times the PDE residual
  ``dT/dx(x) f(x) - A T(x) - B h(x)``.
* ``supervised_nn``: regression loss only; the residual is never evaluated.
* ``unsupervised_ae``: reconstruction ``x -> T -> T* -> x`` plus the residual; Z unused.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .datagen import ObserverSpec, TrajectoryDataset
from .dynamics import DynamicalSystem
from .errors import ConfigurationError, DivergenceError
from .neural import (
    DEFAULT_HIDDEN, MlpModel, fit_normalization, forward, forward_with_input_tangent,
    init_model, load_model, save_model, value_grad,
)
from . import _kernels

__all__ = [
    "METHODS", "TrainingConfig", "TrainedPair", "loss_regression", "loss_physics", "loss_ae",
    "lr_schedule", "train", "save_trained", "load_trained", "grid_tune",
]

METHODS = ("pinn", "supervised_nn", "unsupervised_ae")


@dataclass(frozen=True)
class TrainingConfig:
    method: str = "pinn"
    chi: float = 1.0
    lam: float = 0.5
    learning_rate: float = 1e-3
    lr_decay: float = 1.0
    decay_interval: Optional[int] = None  # steps; None means one epoch
    batch_size: int = 32
    epochs: int = 10
    steps_per_epoch: Optional[int] = None  # None means one pass over the regression points
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    hidden: tuple = DEFAULT_HIDDEN
    activation: str = "relu"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}",
                                     path="training.method")
        for name in ("chi", "lam"):
            if getattr(self, name) < 0:
                raise ConfigurationError("must be nonnegative", path=f"training.{name}")
        if not self.learning_rate > 0:
            raise ConfigurationError("must be positive", path="training.learning_rate")
        if self.batch_size < 1:
            raise ConfigurationError("must be >= 1", path="training.batch_size")
        if self.epochs < 0:
            raise ConfigurationError("must be >= 0", path="training.epochs")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def uses_physics(self):
        return self.method in ("pinn", "unsupervised_ae")


@dataclass
class TrainedPair:
    T_model: MlpModel
    Tstar_model: MlpModel
    config: TrainingConfig
    history: dict = field(default_factory=dict)  # per-step arrays
    steps_per_epoch: int = 0
    dataset_digest: str = ""

    def epoch_history(self):
        """Per-epoch means of ``(regression_loss, physics_residual, total)``."""
        n = self.steps_per_epoch
        rows = []
        steps = len(self.history.get("total", []))
        for start in range(0, steps, max(n, 1)):
            sl = slice(start, start + n)
            rows.append(tuple(float(np.mean(self.history[k][sl]))
                              for k in ("regression_loss", "physics_residual", "total")))
        return rows


# --- losses -------------------------------------------------------------------

def _check_batch(x):
    if len(x) == 0:
        raise ConfigurationError("empty batch")


def loss_regression(T_model, Tstar_model, x, z, chi):
    """Mean of ``||z - T(x)||^2 + chi ||x - T*(T(x))||^2`` with gradients for both nets."""
    _check_batch(x)
    x = np.atleast_2d(x)
    z = np.atleast_2d(z)
    N = x.shape[0]
    zt = forward(T_model, x)
    r1 = zt - z
    if chi == 0:
        loss = float(np.sum(r1 * r1) / N)
        g_eta = np.zeros_like(Tstar_model.params)
        g_theta, _ = value_grad(T_model, x, 2.0 * r1 / N)
        return loss, g_theta, g_eta
    xr = forward(Tstar_model, zt)
    r2 = xr - x
    loss = float((np.sum(r1 * r1) + chi * np.sum(r2 * r2)) / N)
    g_eta, gz = value_grad(Tstar_model, zt, 2.0 * chi * r2 / N)
    g_theta, _ = value_grad(T_model, x, 2.0 * r1 / N + gz)
    return loss, g_theta, g_eta


def physics_residual(T_model, system: DynamicalSystem, spec: ObserverSpec, x):
    """Rowwise ``dT/dx(x) f(x) - A T(x) - B h(x)``."""
    x = np.atleast_2d(x)
    fx = system.f(x)
    dual = forward_with_input_tangent(T_model, x, fx)
    return dual.input_tangent - dual.value @ spec.A.T - system.h(x) @ spec.B.T, fx


def loss_physics(T_model, system, spec, x):
    """Mean squared PDE residual and its gradient in the transformation's parameters."""
    _check_batch(x)
    x = np.atleast_2d(x)
    N = x.shape[0]
    r, fx = physics_residual(T_model, system, spec, x)
    loss = float(np.sum(r * r) / N)
    G = 2.0 * r / N
    m = T_model
    Xn = (x - m.in_mean) / m.in_std
    Dn = fx / m.in_std
    # value enters the residual as -A T(x), tangent with +1
    g = _kernels.mlp_tangent_grad(m.params, m.layer_dims, m.act_code, Xn, Dn,
                                  (-G @ spec.A) * m.out_std, G * m.out_std)
    return loss, g


def loss_ae(T_model, Tstar_model, system, spec, x, lam, x_physics=None):
    """Mean ``||x - T*(T(x))||^2`` plus ``lam`` times the residual; no latent targets."""
    _check_batch(x)
    x = np.atleast_2d(x)
    N = x.shape[0]
    zt = forward(T_model, x)
    r = forward(Tstar_model, zt) - x
    rec = float(np.sum(r * r) / N)
    g_eta, gz = value_grad(Tstar_model, zt, 2.0 * r / N)
    g_theta, _ = value_grad(T_model, x, gz)
    if lam == 0:
        return rec, g_theta, g_eta
    phys, g_phys = loss_physics(T_model, system, spec, x if x_physics is None else x_physics)
    return rec + lam * phys, g_theta + lam * g_phys, g_eta


def lr_schedule(step: int, config: TrainingConfig, steps_per_epoch: int = 1) -> float:
    """``learning_rate * lr_decay ** (step // interval)``; interval defaults to one epoch."""
    interval = config.decay_interval or steps_per_epoch or 1
    return config.learning_rate * config.lr_decay ** (step // interval)


# --- training loop ------------------------------------------------------------

class _Adam:
    def __init__(self, n, beta1, beta2, eps):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        m_hat = self.m / (1.0 - self.b1 ** self.t)
        v_hat = self.v / (1.0 - self.b2 ** self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def initial_models(dataset: TrajectoryDataset, config: TrainingConfig):
    """Freshly initialised ``(T, T*)`` with normalisation fitted to the data."""
    n_x = dataset.states.shape[2]
    n_z = dataset.latents.shape[2]
    ss = np.random.SeedSequence(config.seed)
    s_t, s_ts = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    T = init_model((n_x, *config.hidden, n_z), config.activation, s_t)
    Ts = init_model((n_z, *config.hidden, n_x), config.activation, s_ts)
    x, z = dataset.regression_samples()
    if config.method == "unsupervised_ae":
        T = fit_normalization(T, inputs=x)
        Ts = fit_normalization(Ts, targets=x)
    else:
        T = fit_normalization(T, inputs=x, targets=z)
        Ts = fit_normalization(Ts, inputs=z, targets=x)
    return T, Ts


def train(dataset: TrajectoryDataset, system: DynamicalSystem, spec: ObserverSpec,
          config: TrainingConfig, init: Optional[tuple] = None, callback=None) -> TrainedPair:
    """Minimise the method's objective with mini-batch Adam.

    Regression batches cycle through a fresh permutation of the regression
    points every epoch; physics batches are drawn independently (with
    replacement) from the physics points on a separate random stream, so
    toggling the residual never changes which regression points are visited.
    """
    T, Ts = init if init is not None else initial_models(dataset, config)
    x_reg, z_reg = dataset.regression_samples()
    x_phys = dataset.physics_samples()
    n_reg = x_reg.shape[0]
    bs = config.batch_size
    spe = config.steps_per_epoch or max(1, math.ceil(n_reg / bs))
    total_steps = config.epochs * spe

    ss = np.random.SeedSequence(config.seed)
    rng_reg, rng_phys = (np.random.default_rng(c) for c in ss.spawn(4)[2:])

    nt = T.params.size
    params = np.concatenate([T.params, Ts.params])
    adam = _Adam(params.size, *config.adam_betas, config.adam_eps)
    hist = {k: np.full(total_steps, np.nan) for k in ("regression_loss", "physics_residual", "total", "lr")}

    order = np.empty(0, dtype=np.int64)
    cursor = 0
    method = config.method
    for step in range(total_steps):
        if cursor + bs > order.size:
            order = rng_reg.permutation(n_reg)
            cursor = 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        Tm = T.with_params(params[:nt])
        Tsm = Ts.with_params(params[nt:])
        xb = x_reg[idx]
        phys = math.nan
        if method == "unsupervised_ae":
            reg, g_t, g_s = loss_ae(Tm, Tsm, system, spec, xb, 0.0)
        else:
            reg, g_t, g_s = loss_regression(Tm, Tsm, xb, z_reg[idx], config.chi)
        total = reg
        # a zero weight switches the residual off entirely, so pinn at lambda = 0
        # retraces supervised_nn exactly
        if config.uses_physics and config.lam != 0:
            pidx = rng_phys.integers(0, x_phys.shape[0], bs)
            phys, g_p = loss_physics(Tm, system, spec, x_phys[pidx])
            total = reg + config.lam * phys
            g_t = g_t + config.lam * g_p
        if not math.isfinite(total):
            raise DivergenceError(f"loss became non-finite at epoch {step // spe}, step {step}",
                                  index=step, item=step // spe)
        lr = lr_schedule(step, config, spe)
        params = adam.step(params, np.concatenate([g_t, g_s]), lr)
        hist["regression_loss"][step] = reg
        hist["physics_residual"][step] = phys
        hist["total"][step] = total
        hist["lr"][step] = lr
        if callback is not None and (step + 1) % spe == 0:
            callback((step + 1) // spe, hist, step + 1)

    return TrainedPair(T.with_params(params[:nt]), Ts.with_params(params[nt:]), config, hist, spe,
                       dataset.digest())


def save_trained(pair: TrainedPair, directory, extra_meta=None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_model(pair.T_model, d / "T.json")
    save_model(pair.Tstar_model, d / "Tstar.json")
    with open(d / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "regression_loss", "physics_residual", "total", "lr"])
        h = pair.history
        for k in range(len(h.get("total", []))):
            w.writerow([k] + [repr(float(h[c][k])) for c in ("regression_loss", "physics_residual", "total", "lr")])
    meta = {"config": asdict(pair.config), "steps_per_epoch": pair.steps_per_epoch,
            "dataset_digest": pair.dataset_digest}
    if extra_meta:
        meta.update(extra_meta)
    (d / "train_meta.json").write_text(json.dumps(meta, indent=2))
    return d


def load_trained(directory) -> TrainedPair:
    d = Path(directory)
    meta = json.loads((d / "train_meta.json").read_text())
    cfg = meta["config"]
    config = TrainingConfig(**{**cfg, "adam_betas": tuple(cfg["adam_betas"]), "hidden": tuple(cfg["hidden"])})
    hist = {}
    path = d / "loss_history.csv"
    if path.exists() and len(path.read_text().splitlines()) > 1:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        for j, c in enumerate(("regression_loss", "physics_residual", "total", "lr")):
            hist[c] = data[:, j + 1] if data.size else np.empty(0)
    return TrainedPair(load_model(d / "T.json"), load_model(d / "Tstar.json"), config, hist,
                       meta.get("steps_per_epoch", 0), meta.get("dataset_digest", ""))


def grid_tune(train_set, test_score, system, spec, base: TrainingConfig, chis, lams):
    """Train one model per ``(chi, lambda)`` pair and rank them by ``test_score(pair)`` (lower is better)."""
    results = []
    for chi in chis:
        for lam in lams:
            pair = train(train_set, system, spec, replace(base, chi=float(chi), lam=float(lam)))
            results.append({"chi": float(chi), "lambda": float(lam), "score": float(test_score(pair))})
    results.sort(key=lambda r: r["score"])
    return results
