"""A small MLP with fixed affine input/output normalisation, parameter gradients
(reverse mode) and input Jacobian-vector products (forward mode)."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ConfigurationError

__all__ = [
    "MlpModel", "DualEval", "init_model", "param_count", "fit_normalization", "forward",
    "forward_with_input_tangent", "backward", "backward_through_tangent", "value_grad",
    "save_model", "load_model", "model_to_dict", "model_from_dict", "DEFAULT_HIDDEN",
]

ACTIVATIONS = {"relu": _kernels.RELU, "tanh": _kernels.TANH}
DEFAULT_HIDDEN = (50, 50, 50, 50, 50)
STD_FLOOR = 1e-8


def param_count(layer_dims: Sequence[int]) -> int:
    return int(sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:])))


@dataclass(frozen=True)
class MlpModel:
    layer_dims: tuple
    activation: str
    params: np.ndarray
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ConfigurationError(f"invalid layer dims {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        params = np.asarray(self.params, dtype=float)
        if params.shape != (param_count(dims),):
            raise ConfigurationError(f"expected {param_count(dims)} parameters, got {params.shape}")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "params", params)
        for name, n in (("in_mean", dims[0]), ("in_std", dims[0]),
                        ("out_mean", dims[-1]), ("out_std", dims[-1])):
            v = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if v.shape != (n,):
                raise ConfigurationError(f"{name} must have length {n}")
            object.__setattr__(self, name, v)
        if np.any(self.in_std <= 0) or np.any(self.out_std <= 0):
            raise ConfigurationError("normalisation std entries must be positive")

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    @property
    def act_code(self):
        return ACTIVATIONS[self.activation]

    def with_params(self, params):
        return replace(self, params=params)


@dataclass(frozen=True)
class DualEval:
    value: np.ndarray
    input_tangent: np.ndarray


def init_model(layer_dims, activation="relu", seed=0) -> MlpModel:
    """Zero-mean Gaussian weights with variance 2/fan_in (relu) or 1/fan_in (tanh); zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ConfigurationError("an MLP needs at least an input and an output layer")
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    gain = 2.0 if activation == "relu" else 1.0
    chunks = []
    for din, dout in zip(dims[:-1], dims[1:]):
        chunks.append(rng.normal(0.0, np.sqrt(gain / din), size=dout * din))
        chunks.append(np.zeros(dout))
    return MlpModel(dims, activation, np.concatenate(chunks),
                    np.zeros(dims[0]), np.ones(dims[0]), np.zeros(dims[-1]), np.ones(dims[-1]))


def _stats(samples):
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    return samples.mean(axis=0), np.maximum(samples.std(axis=0), STD_FLOOR)


def fit_normalization(model: MlpModel, inputs=None, targets=None) -> MlpModel:
    """Set input/output standardisation from samples (population std, floored at 1e-8).

    Either side may be omitted to keep its current statistics.
    """
    out = model
    if inputs is not None:
        m, s = _stats(inputs)
        out = replace(out, in_mean=m, in_std=s)
    if targets is not None:
        m, s = _stats(targets)
        out = replace(out, out_mean=m, out_std=s)
    return out


def _as_batch(x, dim, what="input"):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None] if single else x
    if X.ndim != 2 or X.shape[1] != dim:
        raise ConfigurationError(f"{what} has shape {x.shape}, expected (..., {dim})")
    return X, single


def forward(model: MlpModel, x) -> np.ndarray:
    X, single = _as_batch(x, model.in_dim)
    Xn = (X - model.in_mean) / model.in_std
    Y = _kernels.mlp_forward(model.params, model.layer_dims, model.act_code, Xn)
    Y = Y * model.out_std + model.out_mean
    return Y[0] if single else Y


def forward_with_input_tangent(model: MlpModel, x, direction) -> DualEval:
    """Value and Jacobian-vector product ``J(x) @ direction`` (rowwise for batches)."""
    X, single = _as_batch(x, model.in_dim)
    D, _ = _as_batch(direction, model.in_dim, "direction")
    Xn = (X - model.in_mean) / model.in_std
    Dn = D / model.in_std
    Y, Yd = _kernels.mlp_forward_tangent(model.params, model.layer_dims, model.act_code, Xn, Dn)
    Y = Y * model.out_std + model.out_mean
    Yd = Yd * model.out_std
    if single:
        return DualEval(Y[0], Yd[0])
    return DualEval(Y, Yd)


def value_grad(model: MlpModel, x, upstream):
    """``(grad_params, grad_input)`` of ``sum(upstream * forward(x))``."""
    X, single = _as_batch(x, model.in_dim)
    G, _ = _as_batch(upstream, model.out_dim, "upstream")
    Xn = (X - model.in_mean) / model.in_std
    grad, gxn = _kernels.mlp_value_grad(model.params, model.layer_dims, model.act_code, Xn,
                                        G * model.out_std)
    gx = gxn / model.in_std
    return grad, (gx[0] if single else gx)


def backward(model: MlpModel, x, upstream) -> np.ndarray:
    """Parameter gradient of ``upstream . forward(x)``, summed over a batch."""
    return value_grad(model, x, upstream)[0]


def backward_through_tangent(model: MlpModel, x, direction, upstream, upstream_value=None) -> np.ndarray:
    """Parameter gradient of ``upstream . (J(x) direction)``.

    ``upstream_value`` optionally adds ``upstream_value . forward(x)`` in the
    same sweep, which is what a residual mixing value and tangent needs.
    """
    X, _ = _as_batch(x, model.in_dim)
    D, _ = _as_batch(direction, model.in_dim, "direction")
    Gt, _ = _as_batch(upstream, model.out_dim, "upstream")
    Gy = np.zeros_like(Gt) if upstream_value is None else _as_batch(upstream_value, model.out_dim)[0]
    Xn = (X - model.in_mean) / model.in_std
    Dn = D / model.in_std
    return _kernels.mlp_tangent_grad(model.params, model.layer_dims, model.act_code, Xn, Dn,
                                     Gy * model.out_std, Gt * model.out_std)


def model_to_dict(model: MlpModel) -> dict:
    return {
        "layer_dims": list(model.layer_dims),
        "activation": model.activation,
        "params": model.params.tolist(),
        "in_norm": {"mean": model.in_mean.tolist(), "std": model.in_std.tolist()},
        "out_norm": {"mean": model.out_mean.tolist(), "std": model.out_std.tolist()},
    }


def model_from_dict(d: dict) -> MlpModel:
    return MlpModel(tuple(d["layer_dims"]), d["activation"], np.array(d["params"], dtype=float),
                    np.array(d["in_norm"]["mean"]), np.array(d["in_norm"]["std"]),
                    np.array(d["out_norm"]["mean"]), np.array(d["out_norm"]["std"]))


def save_model(model: MlpModel, path) -> None:
    # json emits repr() of floats: shortest round-trip decimal
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> MlpModel:
    return model_from_dict(json.loads(Path(path).read_text()))
