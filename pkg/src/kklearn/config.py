"""Experiment configuration: one YAML file describes a reproducible run."""
from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .datagen import ObserverSpec
from .dynamics import BUILTIN_SYSTEMS, Box, DynamicalSystem, TimeGrid, builtin_system
from .errors import ConfigurationError
from .observer import NoiseSpec
from .training import METHODS, TrainingConfig

__all__ = ["ExperimentConfig", "load_config", "parse_config", "dump_config", "inline_system"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class InlineSystem(_Strict):
    """Vector field and output as expressions in ``x1 .. xn``."""

    name: str = "inline"
    f: List[str]
    h: List[str]
    box: Optional[List[List[float]]] = None


class ObserverCfg(_Strict):
    A: List[List[float]]
    B: List[List[float]]


class NoiseCfg(_Strict):
    process_std: Union[float, List[float]] = 0.0
    sensor_std: Union[float, List[float]] = 0.0
    seed: int = 0
    hold: int = Field(1, ge=1)


class DatagenCfg(_Strict):
    p: int = Field(100, ge=1)
    box: Optional[List[List[float]]] = None
    horizon: float = Field(50.0, gt=0)
    dt: float = Field(0.01, gt=0)
    epsilon: float = Field(1e-3, gt=0)
    seed: int = 0
    partition: Literal["even_odd", "interleave"] = "even_odd"
    partition_ratio: int = Field(2, ge=2)


class TrainingCfg(_Strict):
    method: Literal["pinn", "supervised_nn", "unsupervised_ae"] = "pinn"
    chi: float = Field(1.0, ge=0)
    lam: float = Field(0.5, ge=0, alias="lambda")
    learning_rate: float = Field(1e-3, gt=0)
    lr_decay: float = Field(1.0, gt=0, le=1)
    decay_interval: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(10, ge=0)
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    seed: int = 0
    adam_betas: List[float] = [0.9, 0.999]
    adam_eps: float = Field(1e-8, gt=0)
    hidden: List[int] = [50, 50, 50, 50, 50]
    activation: Literal["relu", "tanh"] = "relu"

    def build(self, **overrides) -> TrainingConfig:
        d = self.model_dump()
        d.update(overrides)
        d["adam_betas"] = tuple(d["adam_betas"])
        d["hidden"] = tuple(d["hidden"])
        return TrainingConfig(**d)


class ObserveCfg(_Strict):
    x0: Optional[List[float]] = None
    horizon: float = Field(50.0, ge=0)
    noise: NoiseCfg = NoiseCfg()
    warm_start: bool = True


class EvaluationCfg(_Strict):
    deltas: List[float] = [0.5 * k for k in range(1, 21)]
    q: int = Field(10, ge=1)
    ensemble_size: int = Field(50, ge=1)
    outside_margin: float = Field(1.0, gt=0)
    horizon: float = Field(20.0, gt=0)
    dt: Optional[float] = Field(None, gt=0)
    noise: Optional[NoiseCfg] = None
    seed: int = 0
    methods: List[Literal["pinn", "supervised_nn", "unsupervised_ae"]] = list(METHODS)

    @field_validator("deltas")
    @classmethod
    def _deltas(cls, v):
        if not v:
            raise ValueError("deltas must not be empty")
        if any(d <= 0 for d in v):
            raise ValueError("deltas must be positive")
        return v


class ExperimentConfig(_Strict):
    system: Union[str, InlineSystem] = "reverse_duffing"
    observer: Union[Literal["default"], ObserverCfg] = "default"
    datagen: DatagenCfg = DatagenCfg()
    training: TrainingCfg = TrainingCfg()
    evaluation: EvaluationCfg = EvaluationCfg()
    observe: ObserveCfg = ObserveCfg()
    output_dir: str = "runs/default"

    @field_validator("system")
    @classmethod
    def _system(cls, v):
        if isinstance(v, str) and v not in BUILTIN_SYSTEMS:
            raise ValueError(f"unknown system {v!r}; builtins are {list(BUILTIN_SYSTEMS)}")
        return v

    @model_validator(mode="after")
    def _shapes(self):
        sys_ = self.build_system()
        self.build_observer(sys_)
        if self.datagen.box is not None:
            b = self.datagen.box
            if len(b) != 2 or len(b[0]) != sys_.state_dim or len(b[1]) != sys_.state_dim:
                raise ValueError(f"datagen.box must be [[lo...], [hi...]] with {sys_.state_dim} entries")
        if self.observe.x0 is not None and len(self.observe.x0) != sys_.state_dim:
            raise ValueError(f"observe.x0 must have {sys_.state_dim} entries")
        return self

    # --- builders -------------------------------------------------------------

    def build_system(self) -> DynamicalSystem:
        if isinstance(self.system, str):
            return builtin_system(self.system)
        return inline_system(self.system)

    def build_observer(self, system: Optional[DynamicalSystem] = None) -> ObserverSpec:
        system = system or self.build_system()
        if self.observer == "default":
            return ObserverSpec.default(system.state_dim, system.output_dim)
        spec = ObserverSpec(np.array(self.observer.A, dtype=float), np.array(self.observer.B, dtype=float))
        if spec.n_y != system.output_dim:
            raise ConfigurationError(f"B has {spec.n_y} columns but the system has {system.output_dim} outputs",
                                     path="observer.B")
        return spec

    def sampling_box(self, system: Optional[DynamicalSystem] = None) -> Box:
        system = system or self.build_system()
        if self.datagen.box is not None:
            return Box(*self.datagen.box)
        if system.name == "scalar_linear":
            return Box.cube(1)
        if system.box is None:
            raise ConfigurationError("no sampling box: set datagen.box", path="datagen.box")
        return system.box

    def data_grid(self) -> TimeGrid:
        return TimeGrid.horizon(self.datagen.horizon, self.datagen.dt)

    def eval_grid(self) -> TimeGrid:
        return TimeGrid.horizon(self.evaluation.horizon, self.evaluation.dt or self.datagen.dt)

    def eval_noise(self) -> Optional[NoiseSpec]:
        n = self.evaluation.noise
        return None if n is None else NoiseSpec(_tup(n.process_std), _tup(n.sensor_std), n.seed, n.hold)

    def observe_noise(self) -> NoiseSpec:
        n = self.observe.noise
        return NoiseSpec(_tup(n.process_std), _tup(n.sensor_std), n.seed, n.hold)

    def to_dict(self) -> dict:
        return self.model_dump(by_alias=True, mode="json")


def _tup(v):
    return tuple(v) if isinstance(v, list) else v


def inline_system(cfg: InlineSystem) -> DynamicalSystem:
    """Compile expression strings into a broadcasting numpy system."""
    import sympy

    n = len(cfg.f)
    syms = sympy.symbols(" ".join(f"x{i + 1}" for i in range(n)) + (" _pad" if n == 1 else ""))[:n]
    loc = {str(s): s for s in syms}
    try:
        f_exprs = [sympy.sympify(e, locals=loc) for e in cfg.f]
        h_exprs = [sympy.sympify(e, locals=loc) for e in cfg.h]
    except (sympy.SympifyError, TypeError) as exc:
        raise ConfigurationError(f"cannot parse expression: {exc}", path="system") from exc
    free = set().union(*(e.free_symbols for e in f_exprs + h_exprs)) - set(syms)
    if free:
        raise ConfigurationError(f"unknown symbols {sorted(map(str, free))}", path="system")
    f_fn = sympy.lambdify(syms, f_exprs, "numpy")
    h_fn = sympy.lambdify(syms, h_exprs, "numpy")

    def _wrap(fn):
        def call(x):
            x = np.asarray(x, dtype=float)
            cols = fn(*(x[..., i] for i in range(n)))
            return np.stack([np.broadcast_to(np.asarray(c, dtype=float), x.shape[:-1]) for c in cols], axis=-1)
        return call

    box = Box(*cfg.box) if cfg.box is not None else None
    return DynamicalSystem(cfg.name, n, len(cfg.h), _wrap(f_fn), _wrap(h_fn), box)


def _loc(err) -> str:
    inner = (err.get("ctx") or {}).get("error")
    if isinstance(inner, ConfigurationError) and inner.path:
        return inner.path
    # drop the union-branch tags pydantic inserts into locations
    return ".".join(str(p) for p in err["loc"] if not (isinstance(p, str) and (p[:1].isupper() or p == "str")))


def _msg(err) -> str:
    inner = (err.get("ctx") or {}).get("error")
    if isinstance(inner, ConfigurationError):
        return inner.message
    return err["msg"]


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigurationError(_msg(first), path=_loc(first) or None) from exc


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"invalid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError("top level of the config must be a mapping")
    return parse_config(data)


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text
