"""Command-line front end: ``twcv {simulate,tasks,weights,evaluate,experiment}``.

Precedence is flags > config file > defaults. Every command writes a
manifest.json with the config hash and master seed next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import calibration as cal
from . import taskgen
from .config import RunConfig, load_config
from .core import DataError, build_deployment_tasks, ingest_dataset, read_grid, write_dataset, write_table
from .experiment import run_experiment, write_results
from .risk import ESTIMATORS, child_seed, estimate_risks, estimator_weights
from .simfield import DESIGNS, WORLD_HEADER, draw_sample, make_world, scenario_stream

WORKERS_ENV = "TWCV_WORKERS"

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed")
    common.add_argument("--out-dir", metavar="PATH", help="output directory")
    common.add_argument("--workers", type=int, metavar="N",
                        help=f"worker processes (default: ${WORKERS_ENV} or config)")
    common.add_argument("--replicates", type=int, metavar="N")
    common.add_argument("--design", choices=DESIGNS)

    p = argparse.ArgumentParser(prog="twcv", description="Target-weighted cross-validation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="write simulated worlds and samples")

    t = sub.add_parser("tasks", parents=[common], help="generate validation tasks for a dataset")
    t.add_argument("dataset", help="CSV with coordinates, response and covariates")
    t.add_argument("--generator", choices=taskgen.GENERATORS, default="buffered")

    w = sub.add_parser("weights", parents=[common], help="weights of one estimator for a dataset")
    w.add_argument("dataset")
    w.add_argument("grid", help="CSV of deployment locations with the covariate columns")
    w.add_argument("--estimator", default="twcv",
                   choices=[k for k, v in ESTIMATORS.items() if v[0] is not None])

    e = sub.add_parser("evaluate", parents=[common], help="all estimators on a dataset and grid")
    e.add_argument("dataset")
    e.add_argument("grid")

    sub.add_parser("experiment", parents=[common], help="Monte Carlo experiment")
    return p


def _config_sets_workers(path) -> bool:
    if path is None:
        return False
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    return isinstance(doc, dict) and "workers" in doc


def resolve_config(args) -> RunConfig:
    """Config file, then environment default for workers, then flags."""
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from None
    over: dict = {}
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.out_dir is not None:
        over["out_dir"] = args.out_dir
    workers = args.workers
    if workers is None and os.environ.get(WORKERS_ENV) and not _config_sets_workers(args.config):
        try:
            workers = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer") from None
    if workers is not None:
        over["workers"] = workers
    if args.design is not None:
        over["scenario"] = replace(cfg.scenario, design=args.design)
    if args.replicates is not None:
        over["experiment"] = replace(cfg.experiment, replicates=args.replicates)
    try:
        return replace(cfg, **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def write_manifest(out: Path, command: str, cfg: RunConfig, outputs, extra=None) -> Path:
    doc = {
        "command": command,
        "version": __version__,
        "master_seed": int(cfg.master_seed),
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
    }
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _header(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        try:
            return [h.strip() for h in next(csv.reader(fh))]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None


def load_inputs(cfg: RunConfig, dataset_path, grid_path=None):
    """Dataset plus (optionally) the deployment grid, with consistent covariates."""
    ev = cfg.evaluate
    if not Path(dataset_path).exists():
        raise DataError(f"no such file: {dataset_path}")
    covs = ev.covariate_columns
    if covs is None:
        skip = set(ev.coord_columns) | {ev.response_column}
        covs = tuple(h for h in _header(dataset_path) if h not in skip)
    data = ingest_dataset(dataset_path, ev.coord_columns, ev.response_column, covs)
    bal = ev.balancing_variables or ()
    missing = [b for b in bal if b not in covs]
    if missing:
        raise DataError(f"{dataset_path}: balancing column(s) {', '.join(missing)} not among covariates")
    if grid_path is None:
        return data, None, None
    if not Path(grid_path).exists():
        raise DataError(f"no such file: {grid_path}")
    missing = [c for c in tuple(ev.coord_columns) + tuple(covs) if c not in _header(grid_path)]
    if missing:
        raise DataError(f"{grid_path}: target grid is missing column(s) {', '.join(missing)}")
    coords, X = read_grid(grid_path, ev.coord_columns, covs)
    return data, coords, X


def cmd_simulate(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    scen = cfg.scenario
    written = []
    for r in range(cfg.experiment.replicates):
        ss = scenario_stream(cfg.master_seed, r)
        world = make_world(scen, np.random.default_rng(child_seed(ss, 0)))
        data = draw_sample(world, scen, np.random.default_rng(child_seed(ss, 1)))
        rep = out / f"replicate_{r:04d}"
        rep.mkdir(exist_ok=True)
        written.append(write_table(rep / "world.csv", WORLD_HEADER, world.rows()))
        written.append(write_dataset(data, rep / "sample.csv"))
    write_manifest(out, "simulate", cfg, written)
    print(f"wrote {len(written) // 2} replicate(s) to {out}")
    return EXIT_OK


def cmd_tasks(cfg: RunConfig, dataset, generator: str) -> int:
    data, _, _ = load_inputs(cfg, dataset)
    s = cfg.evaluate.settings
    rng = np.random.default_rng(child_seed(np.random.SeedSequence(cfg.master_seed), 0,
                                           taskgen.GENERATORS.index(generator)))
    ts = taskgen.generate(generator, data, rng, k=s.k, n_tasks=s.n_tasks, min_train_frac=s.min_train_frac)
    out = _out_dir(cfg)
    path = write_table(out / "tasks.csv", taskgen.TASKS_HEADER + data.covariate_names, taskgen.task_rows(ts))
    write_manifest(out, "tasks", cfg, [path], {"generator": generator})
    print(f"wrote {len(ts)} {generator} tasks to {path}")
    return EXIT_OK


WEIGHTS_HEADER = ("task_id", "target_index", "raw_weight", "shrunk_weight")
EVAL_DIAG_HEADER = ("estimator", "n_tasks", "ess", "ess_fraction", "p95_relative_weight",
                    "max_margin_residual", "note")


def cmd_weights(cfg: RunConfig, dataset, grid, estimator: str) -> int:
    data, coords, X = load_inputs(cfg, dataset, grid)
    ev = cfg.evaluate
    settings = ev.estimator_settings(data.covariate_names)
    gen = ESTIMATORS[estimator][0]
    rng = np.random.default_rng(child_seed(np.random.SeedSequence(cfg.master_seed), 0,
                                           taskgen.GENERATORS.index(gen)))
    target = build_deployment_tasks(coords, X, data.coords, data.covariate_names)
    ts = taskgen.generate(gen, data, rng, k=settings.k, n_tasks=settings.n_tasks,
                          min_train_frac=settings.min_train_frac, target_d=settings.buffer_target(target))
    raw, w = estimator_weights(estimator, ts, target, settings)
    diag = cal.weight_diagnostics(ts.target_indices, w, data.n)
    out = _out_dir(cfg)
    paths = [
        write_table(out / "weights.csv", WEIGHTS_HEADER,
                    zip([t.task_id for t in ts], ts.target_indices, raw.weights, w.weights)),
        write_table(out / "diagnostics.csv", EVAL_DIAG_HEADER,
                    [(estimator, len(ts), diag["ess"], diag["ess_fraction"], diag["p95_relative_weight"],
                      diag["max_margin_residual"], "")]),
    ]
    write_manifest(out, "weights", cfg, paths, {"estimator": estimator})
    print(f"{estimator}: ESS fraction {diag['ess_fraction']:.3f}; wrote {out}")
    return EXIT_OK


ESTIMATES_HEADER = ("model", "estimator", "rmse_estimate", "ess_fraction", "p95_weight",
                    "n_failed_tasks", "note")


def cmd_evaluate(cfg: RunConfig, dataset, grid) -> int:
    data, coords, X = load_inputs(cfg, dataset, grid)
    ev = cfg.evaluate
    names = data.covariate_names
    results, weights, _ = estimate_risks(data, coords, X, ev.suite, ev.model_specs(names),
                                         ev.estimator_settings(names),
                                         np.random.SeedSequence(cfg.master_seed))
    out = _out_dir(cfg)
    wrows, drows = [], []
    for label, wo in weights.items():
        if wo.note and wo.weights is None:
            print(f"warning: {label}: {wo.note}", file=sys.stderr)
        d = wo.diagnostics
        drows.append((label, len(wo.tasks) if wo.tasks is not None else 0, d.get("ess", np.nan),
                      d.get("ess_fraction", np.nan), d.get("p95_relative_weight", np.nan),
                      d.get("max_margin_residual", np.nan), wo.note))
        if wo.weights is None:
            continue
        for t, r, s in zip(wo.tasks, wo.raw.weights, wo.weights.weights):
            wrows.append((label, t.task_id, t.target_index, r, s))
    paths = [
        write_table(out / "estimates.csv", ESTIMATES_HEADER,
                    [(r.model, r.estimator, r.rmse_estimate, r.ess_fraction, r.p95_weight,
                      r.n_failed_tasks, r.note) for r in results]),
        write_table(out / "weights.csv", ("estimator",) + WEIGHTS_HEADER, wrows),
        write_table(out / "diagnostics.csv", EVAL_DIAG_HEADER, drows),
    ]
    write_manifest(out, "evaluate", cfg, paths)
    for r in results:
        est = "NA" if np.isnan(r.rmse_estimate) else f"{r.rmse_estimate:.4f}"
        print(f"{r.model:>4} {r.estimator:<20} {est}")
    return EXIT_OK


def cmd_experiment(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    exp = cfg.experiment

    def progress(o):
        r, _, _, err = o
        print(f"replicate {r}: {'FAILED ' + err if err else 'ok'}", file=sys.stderr)

    output = run_experiment(exp, workers=cfg.workers, progress=progress)
    paths = write_results(out, output)
    write_manifest(out, "experiment", cfg, paths.values(),
                   {"failed_replicates": [r for r, _ in output.failures]})
    n_ok = exp.replicates - len(output.failures)
    print(f"{n_ok}/{exp.replicates} replicates succeeded; wrote {out}")
    return EXIT_OK if output.ok else EXIT_FAILED


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "tasks":
            return cmd_tasks(cfg, args.dataset, args.generator)
        if args.command == "weights":
            return cmd_weights(cfg, args.dataset, args.grid, args.estimator)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.dataset, args.grid)
        return cmd_experiment(cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (DataError, cal.CoverageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
