"""Command-line front end: ``kklearn <command> --config run.yaml``.

Exit codes: 0 success, 2 validation error, 3 numerical divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, dump_config, load_config
from .datagen import ObserverSpec, generate_dataset, load_dataset, save_dataset
from .dynamics import TimeGrid
from .errors import ConfigurationError, DivergenceError
from .evaluation import (EvalProtocol, compare_methods, generalization_sweep, mean_error_variance,
                         normalized_error_trace, write_report, write_sweep_csv)
from .observer import estimate, save_run_csv
from .training import grid_tune, load_trained, save_trained, train

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4


def _out_dir(args, cfg: ExperimentConfig, sub: str) -> Path:
    d = Path(args.out) if args.out else Path(cfg.output_dir) / sub
    d.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, d / "config.yaml")
    return d


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg = cfg.model_copy(update={
            "datagen": cfg.datagen.model_copy(update={"seed": s}),
            "training": cfg.training.model_copy(update={"seed": s}),
            "evaluation": cfg.evaluation.model_copy(update={"seed": s}),
        })
    return cfg


def _make_dataset(cfg: ExperimentConfig):
    system = cfg.build_system()
    spec = cfg.build_observer(system)
    d = cfg.datagen
    ds = generate_dataset(system, spec, cfg.sampling_box(system), d.p, cfg.data_grid(), d.epsilon, d.seed,
                          d.partition, d.partition_ratio)
    return system, spec, ds


def _check_dataset(ds, system, spec: ObserverSpec):
    if ds.source_system != system.name:
        raise ConfigurationError(f"dataset was generated for {ds.source_system!r}, config names {system.name!r}",
                                 path="system")
    if not (np.array_equal(ds.observer_spec.A, spec.A) and np.array_equal(ds.observer_spec.B, spec.B)):
        raise ConfigurationError("dataset observer (A, B) differs from the config", path="observer")


def _dataset_for(args, cfg):
    system = cfg.build_system()
    spec = cfg.build_observer(system)
    if args.dataset:
        ds = load_dataset(args.dataset)
        _check_dataset(ds, system, spec)
        return system, spec, ds
    return _make_dataset(cfg)


def cmd_validate(args) -> int:
    cfg = _load(args)
    system = cfg.build_system()
    spec = cfg.build_observer(system)
    print(f"ok: system={system.name} n_x={system.state_dim} n_y={system.output_dim} n_z={spec.n_z} "
          f"method={cfg.training.method}")
    if args.dump:
        sys.stdout.write(dump_config(cfg))
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load(args)
    system, spec, ds = _make_dataset(cfg)
    out = _out_dir(args, cfg, "dataset")
    save_dataset(ds, out)
    print(f"dataset: p={ds.p} tau_s={ds.grid.t_end:g} tau_b={ds.burn_in:.4f} n_z={spec.n_z} "
          f"digest={ds.digest()} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    system, spec, ds = _dataset_for(args, cfg)
    tc = cfg.training.build()
    pair = train(ds, system, spec, tc)
    out = _out_dir(args, cfg, f"models_{tc.method}")
    save_trained(pair, out, {"system": system.name, "spec": spec.to_dict()})
    h = pair.history
    last = {k: float(v[-1]) for k, v in h.items() if len(v)}
    print(f"trained {tc.method}: steps={len(h['total'])} final total={last.get('total', float('nan')):.6g} -> {out}")
    return EXIT_OK


def _models(args, system, spec):
    if not args.models:
        raise ConfigurationError("--models DIR is required", path="models")
    pair = load_trained(args.models)
    if pair.T_model.layer_dims[0] != system.state_dim or pair.T_model.layer_dims[-1] != spec.n_z:
        raise ConfigurationError("model dimensions do not match the configured system/observer", path="models")
    return pair


def cmd_observe(args) -> int:
    cfg = _load(args)
    system = cfg.build_system()
    spec = cfg.build_observer(system)
    pair = _models(args, system, spec)
    sc = cfg.observe
    horizon = args.horizon if args.horizon is not None else sc.horizon
    x0 = np.array(sc.x0 if sc.x0 is not None else cfg.sampling_box(system).center, dtype=float)
    if args.x0:
        x0 = np.array([float(v) for v in args.x0.split(",")])
        if x0.size != system.state_dim:
            raise ConfigurationError(f"--x0 needs {system.state_dim} values", path="observe.x0")
    grid = TimeGrid.horizon(float(horizon), cfg.datagen.dt)
    noise = cfg.observe_noise()
    runs, _ = estimate(system, spec, pair.T_model, pair.Tstar_model, x0[None], grid, noise,
                       warm_start=sc.warm_start)
    run = runs[0]
    out = _out_dir(args, cfg, "observe")
    save_run_csv(out / "run.csv", run, noise)
    e, _ = normalized_error_trace(run)
    with open(out / "phase.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        nx = system.state_dim
        w.writerow([f"x_{j + 1}" for j in range(nx)] + [f"xhat_{j + 1}" for j in range(nx)] + ["e"])
        for k in range(grid.sample_count):
            w.writerow([repr(float(v)) for v in np.concatenate([run.true_states[k], run.estimate[k], [e[k]]])])
    if not np.all(np.isfinite(run.estimate)):
        raise DivergenceError("observer estimate became non-finite")
    print(f"observe: samples={grid.sample_count} final normalized error={e[-1]:.4g} -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    system, spec, ds = _dataset_for(args, cfg)
    pair = _models(args, system, spec)
    box = ds.box or cfg.sampling_box(system)
    ev = cfg.evaluation
    sw = generalization_sweep(pair, system, spec, box, ev.deltas, ev.q, cfg.eval_grid(), ds.states[:, 0])
    out = _out_dir(args, cfg, "sweep")
    write_sweep_csv(out / "gen_sweep.csv", sw)
    (out / "sweep.json").write_text(json.dumps({"E_train": sw.E_train, "mean_G_emp": sw.mean_G_emp,
                                                "excluded": sw.excluded.tolist()}, indent=2))
    print(f"sweep: {len(sw.deltas)} deltas, E_train={sw.E_train:.4g}, mean G_emp={sw.mean_G_emp:.4g} -> {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    system, spec, ds = _dataset_for(args, cfg)
    ev = cfg.evaluation
    configs = {m: cfg.training.build(method=m) for m in ev.methods}
    protocol = EvalProtocol(tuple(ev.deltas), ev.q, ev.ensemble_size, ev.outside_margin, cfg.eval_grid(),
                            cfg.eval_noise(), ev.seed)
    box = ds.box or cfg.sampling_box(system)
    if box.dim != 2:
        protocol = EvalProtocol((), ev.q, ev.ensemble_size, ev.outside_margin, cfg.eval_grid(),
                                cfg.eval_noise(), ev.seed)
        print("compare: non-planar system, skipping the ring sweep", file=sys.stderr)
    results = compare_methods(ds, system, spec, configs, protocol, box=box)
    out = _out_dir(args, cfg, "compare")
    for label, res in results.items():
        save_trained(res.trained, out / label / "models", {"system": system.name, "spec": spec.to_dict()})
    write_report(out, results, protocol, {"dataset_digest": ds.digest(), "version": __version__})
    for label, res in results.items():
        g = f"{res.sweep.mean_G_emp:.4g}" if res.sweep is not None else "n/a"
        print(f"{label}: ensemble={res.traces.shape[0]} mean_G_emp={g}")
    print(f"report -> {out}")
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = _load(args)
    system, spec, ds = _dataset_for(args, cfg)
    chis = [float(v) for v in args.chis.split(",")]
    lams = [float(v) for v in args.lams.split(",")]
    held = generate_dataset(system, spec, ds.box or cfg.sampling_box(system), max(ds.p // 4, 1), ds.grid,
                            ds.epsilon, ds.seed + 1)
    grid = cfg.eval_grid()

    def score(pair):
        runs, _ = estimate(system, spec, pair.T_model, pair.Tstar_model, held.states[:, 0], grid,
                           raise_on_divergence=False)
        good = [r for r in runs if r is not None]
        return mean_error_variance(good) if good else float("inf")

    ranked = grid_tune(ds, score, system, spec, cfg.training.build(), chis, lams)
    out = _out_dir(args, cfg, "tune")
    (out / "tune.json").write_text(json.dumps(ranked, indent=2))
    best = ranked[0]
    print(f"best chi={best['chi']:g} lambda={best['lambda']:g} score={best['score']:.4g} -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kklearn", description="Learned KKL observers: data, training, evaluation.")
    p.add_argument("--version", action="version", version=f"kklearn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=False, models=False):
        sp.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults if omitted)")
        sp.add_argument("--out", metavar="DIR", help="output directory (default: <output_dir>/<command>)")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        if dataset:
            sp.add_argument("--dataset", metavar="DIR", help="reuse a generated dataset")
        if models:
            sp.add_argument("--models", metavar="DIR", help="trained model directory")
        return sp

    v = common(sub.add_parser("validate", help="check a config and print the resolved observer"))
    v.add_argument("--dump", action="store_true", help="print the normalised config")
    v.set_defaults(func=cmd_validate)
    common(sub.add_parser("generate", help="generate a training dataset")).set_defaults(func=cmd_generate)
    common(sub.add_parser("train", help="train T and T*"), dataset=True).set_defaults(func=cmd_train)
    o = common(sub.add_parser("observe", help="run the learned observer on one scenario"), models=True)
    o.add_argument("--x0", help="comma-separated initial state")
    o.add_argument("--horizon", type=float, help="simulation horizon")
    o.set_defaults(func=cmd_observe)
    common(sub.add_parser("sweep", help="generalisation sweep over distances"), dataset=True,
           models=True).set_defaults(func=cmd_sweep)
    common(sub.add_parser("compare", help="train and compare all methods"), dataset=True).set_defaults(func=cmd_compare)
    t = common(sub.add_parser("tune", help="grid search over chi and lambda"), dataset=True)
    t.add_argument("--chis", default="0.5,1.0,2.0")
    t.add_argument("--lams", default="0.1,0.5,1.0")
    t.set_defaults(func=cmd_tune)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
