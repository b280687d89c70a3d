"""Monte Carlo harness: simulated worlds, all estimators, true deployment error."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import write_table
from .models import MODEL_KINDS, ModelSpec
from .risk import (ESTIMATORS, DEFAULT_SUITE, RESULTS_HEADER, EstimatorResult, EstimatorSettings,
                   ReplicateError, child_seed, estimate_risks, rmse_against)
from .simfield import ScenarioConfig, make_world, sample_from_world, sample_nodes, scenario_stream


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    replicates: int = 100
    suite: tuple = DEFAULT_SUITE
    models: tuple = ("rf", "hrk")
    master_seed: int = 1
    n_trees: int = 500
    predictors: tuple = ("x1", "x2")
    settings: EstimatorSettings = field(default_factory=lambda: EstimatorSettings(
        merge_empty_bins=True, accept_unconverged=True))
    # samples sit on grid nodes; drop those nodes from the deployment domain so that,
    # as with continuous sampling, no deployment location coincides with a training point
    exclude_sampled_nodes: bool = True

    def __post_init__(self):
        object.__setattr__(self, "suite", tuple(self.suite))
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "predictors", tuple(self.predictors))
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise ValueError("replicates must be an integer >= 1")
        if not self.suite:
            raise ValueError("estimator suite is empty")
        bad = [s for s in self.suite if s not in ESTIMATORS]
        if bad:
            raise ValueError(f"unknown estimator(s) {', '.join(bad)}; valid: {', '.join(ESTIMATORS)}")
        if not self.models:
            raise ValueError("no models configured")
        bad = [m for m in self.models if m not in MODEL_KINDS]
        if bad:
            raise ValueError(f"unknown model(s) {', '.join(bad)}; valid: {', '.join(MODEL_KINDS)}")
        if len(set(self.models)) != len(self.models) or len(set(self.suite)) != len(self.suite):
            raise ValueError("duplicate model or estimator labels")
        if self.master_seed < 0:
            raise ValueError("master_seed must be non-negative")

    def model_specs(self) -> list:
        return [ModelSpec(kind=m, predictors=self.predictors, n_trees=self.n_trees) for m in self.models]


def run_replicate(cfg: ExperimentConfig, replicate: int):
    """Results and weight diagnostics for one replicate.

    All randomness derives from ``(master_seed, replicate)``.
    """
    ss = scenario_stream(cfg.master_seed, replicate)
    scen = cfg.scenario
    world = make_world(scen, np.random.default_rng(child_seed(ss, 0)))
    nodes = sample_nodes(scen, np.random.default_rng(child_seed(ss, 1)))
    names = scen.covariate_names
    data = sample_from_world(world, nodes, names)
    keep = np.ones(world.coords.shape[0], dtype=bool)
    if cfg.exclude_sampled_nodes:
        keep[nodes] = False
    grid, grid_X, z = world.coords[keep], world.covariates(names)[keep], world.z[keep]
    results, weights, fitted = estimate_risks(data, grid, grid_X, cfg.suite, cfg.model_specs(),
                                              cfg.settings, child_seed(ss, 2))
    truth = {kind: rmse_against(z, m.predict(grid, grid_X, names)) for kind, m in fitted.items()}
    for r in results:
        r.replicate = replicate
        r.design = scen.design
        r.deployment_rmse = truth[r.model]
    diag = []
    for label, wo in weights.items():
        d = wo.diagnostics
        diag.append((replicate, scen.design, label, len(wo.tasks) if wo.tasks is not None else 0,
                     d.get("ess", math.nan), d.get("ess_fraction", math.nan),
                     d.get("p95_relative_weight", math.nan), d.get("max_margin_residual", math.nan),
                     wo.note))
    return results, diag


DIAGNOSTICS_HEADER = ("replicate", "design", "estimator", "n_tasks", "ess", "ess_fraction",
                      "p95_relative_weight", "max_margin_residual", "note")
SUMMARY_HEADER = ("design", "model", "estimator", "n_replicates", "mean_error", "sd_error",
                  "rmse_error", "ci_low", "ci_high", "mean_estimate", "mean_deployment_rmse",
                  "mean_ess_fraction", "median_ess_fraction", "mean_p95_weight")


def _job(args):
    cfg, r = args
    try:
        res, diag = run_replicate(cfg, r)
        return r, res, diag, None
    except (ReplicateError, ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return r, [], [], f"{type(exc).__name__}: {exc}"


@dataclass
class ExperimentOutput:
    results: list
    diagnostics: list
    failures: list  # (replicate, reason)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_experiment(cfg: ExperimentConfig, workers: int = 1, replicates: Sequence[int] | None = None,
                   progress=None) -> ExperimentOutput:
    """Run replicates (serially or in a process pool) and collect them in replicate order."""
    reps = list(range(cfg.replicates)) if replicates is None else list(replicates)
    jobs = [(cfg, r) for r in reps]
    if workers <= 1 or len(jobs) <= 1:
        outs = []
        for j in jobs:
            outs.append(_job(j))
            if progress:
                progress(outs[-1])
    else:
        outs = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for out in pool.map(_job, jobs):
                outs.append(out)
                if progress:
                    progress(out)
    outs.sort(key=lambda o: o[0])
    results, diag, failures = [], [], []
    for r, res, d, err in outs:
        results.extend(res)
        diag.extend(d)
        if err is not None:
            failures.append((r, err))
    return ExperimentOutput(results, diag, failures)


def _finite(values) -> np.ndarray:
    a = np.asarray(values, dtype=float)
    return a[np.isfinite(a)]


def aggregate(results: Sequence[EstimatorResult]) -> list:
    """Per (design, model, estimator): error moments, normal 95% CI and weight summaries."""
    if len({r.replicate for r in results}) < 2:
        raise ValueError("aggregation needs at least 2 replicates")
    groups: dict = {}
    for r in results:
        groups.setdefault((r.design, r.model, r.estimator), []).append(r)
    rows = []
    for (design, model, est), rs in groups.items():
        err = _finite([r.error for r in rs])
        R = err.size
        mean = float(err.mean()) if R else math.nan
        sd = float(err.std(ddof=1)) if R >= 2 else math.nan
        half = 1.96 * sd / math.sqrt(R) if R >= 2 else math.nan
        rmse = math.sqrt(float(np.mean(err * err))) if R else math.nan
        ess = _finite([r.ess_fraction for r in rs])
        p95 = _finite([r.p95_weight for r in rs])
        est_v = _finite([r.rmse_estimate for r in rs])
        dep = _finite([r.deployment_rmse for r in rs])

        def m(a):
            return float(a.mean()) if a.size else math.nan

        rows.append((design, model, est, R, mean, sd, rmse, mean - half, mean + half, m(est_v), m(dep),
                     m(ess), float(np.median(ess)) if ess.size else math.nan, m(p95)))
    return rows


def write_results(out_dir, output: ExperimentOutput) -> dict:
    """Write results.csv, diagnostics.csv and (with >= 2 replicates) summary.csv."""
    out = Path(out_dir)
    paths = {
        "results": write_table(out / "results.csv", RESULTS_HEADER, (r.row() for r in output.results)),
        "diagnostics": write_table(out / "diagnostics.csv", DIAGNOSTICS_HEADER, output.diagnostics),
    }
    if len({r.replicate for r in output.results}) >= 2:
        paths["summary"] = write_table(out / "summary.csv", SUMMARY_HEADER, aggregate(output.results))
    if output.failures:
        paths["failures"] = write_table(out / "failures.csv", ("replicate", "reason"), output.failures)
    return paths


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    d["scenario"] = cfg.scenario.to_dict()
    d["settings"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg.settings).items()}
    for k in ("suite", "models", "predictors"):
        d[k] = list(d[k])
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    unknown = set(d) - {f.name for f in fields(ExperimentConfig)}
    if unknown:
        raise ValueError(f"unknown experiment keys: {', '.join(sorted(unknown))}")
    if "scenario" in d:
        d["scenario"] = ScenarioConfig.from_dict(d["scenario"] or {})
    if "settings" in d:
        s = dict(d["settings"] or {})
        unknown = set(s) - {f.name for f in fields(EstimatorSettings)}
        if unknown:
            raise ValueError(f"unknown settings keys: {', '.join(sorted(unknown))}")
        for k in ("base_variables", "extended_variables"):
            if s.get(k) is not None:
                s[k] = tuple(s[k])
        d["settings"] = EstimatorSettings(**s)
    return ExperimentConfig(**d)
