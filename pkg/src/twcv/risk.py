"""Held-out losses, weighted risk estimates and the estimator engine.

Every estimator is a pair (task generator, weighting rule). Weights are
computed from task descriptors and the deployment tasks only, never from
losses, so one set of weights serves all models.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import calibration as cal
from . import taskgen
from .core import DISTANCE, Dataset, TargetTaskSet, build_deployment_tasks
from .density_ratio import forward_bic_logistic, importance_weights
from .models import FittedModel, ModelSpec, fit_model, rf_oob_mse

MAX_FAILURE_RATE = 0.05

# label -> (task generator, weighting rule)
ESTIMATORS = {
    "loocv": ("loocv", "uniform"),
    "random_cv": ("random_cv", "uniform"),
    "lobo_cv": ("lobo_cv", "uniform"),
    "buffered_cv": ("buffered", "uniform"),
    "dwcv": ("buffered", "dwcv"),
    "twcv": ("buffered", "twcv"),
    "twcv_fine": ("buffered", "twcv_fine"),
    "twcv_extended": ("buffered", "twcv_extended"),
    "twcv_extended_fine": ("buffered", "twcv_extended_fine"),
    "iwcv_random": ("random_cv", "iwcv"),
    "iwcv_buffered": ("buffered", "iwcv"),
    "oob": (None, "model"),
    "kriging_variance": (None, "model"),
}
DEFAULT_SUITE = ("loocv", "random_cv", "lobo_cv", "dwcv", "twcv", "twcv_fine", "twcv_extended",
               "twcv_extended_fine", "iwcv_random", "iwcv_buffered", "oob", "kriging_variance")


class ReplicateError(RuntimeError):
    """Too many validation tasks failed to fit."""


@dataclass(frozen=True)
class LossRecord:
    task_id: int
    loss: float
    failed: bool = False

    def __post_init__(self):
        if not self.failed and not (math.isfinite(self.loss) and self.loss >= 0):
            raise ValueError(f"loss must be finite and non-negative, got {self.loss}")


@dataclass
class EstimatorResult:
    estimator: str
    model: str
    rmse_estimate: float
    deployment_rmse: float = float("nan")
    ess_fraction: float = float("nan")
    p95_weight: float = float("nan")
    n_failed_tasks: int = 0
    note: str = ""
    replicate: int = -1
    design: str = ""

    @property
    def error(self) -> float:
        return self.rmse_estimate - self.deployment_rmse

    def row(self) -> tuple:
        return (self.replicate, self.design, self.model, self.estimator, self.rmse_estimate,
                self.deployment_rmse, self.error, self.ess_fraction, self.p95_weight,
                self.n_failed_tasks, self.note)


RESULTS_HEADER = ("replicate", "design", "model", "estimator", "rmse_estimate", "deployment_rmse",
                  "error", "ess_fraction", "p95_weight", "n_failed_tasks", "note")


def child_seed(ss: np.random.SeedSequence, *keys: int) -> np.random.SeedSequence:
    """Named sub-stream: depends only on the parent and the integer keys."""
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(int(k) for k in keys))


def _as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(0 if seed is None else seed)


def cv_losses(model_spec: ModelSpec, tasks: taskgen.TaskSet, data: Dataset, seed=None) -> list:
    """Squared held-out error per task, refitting the model on each training set.

    Tasks sharing a training set share one fit. A fit or prediction failure
    yields a record flagged as failed with a NaN loss.
    """
    base = _as_seedseq(seed)
    records: list = [None] * len(tasks)
    for group in tasks.train_groups():
        first = tasks.tasks[group[0]]
        targets = np.array([tasks.tasks[i].target_index for i in group])
        try:
            fitted = fit_model(model_spec, data.subset(first.train_indices), child_seed(base, first.task_id))
            pred = fitted.predict(data.coords[targets], data.covariates[targets], data.covariate_names)
            loss = (data.response[targets] - pred) ** 2
            if not np.all(np.isfinite(loss)):
                raise FloatingPointError("non-finite prediction")
        except (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError):
            loss = None
        for j, pos in enumerate(group):
            tid = tasks.tasks[pos].task_id
            records[pos] = (LossRecord(tid, float("nan"), True) if loss is None
                            else LossRecord(tid, float(loss[j])))
    return records


def weighted_rmse(losses, w) -> float:
    """Square root of the weighted mean loss."""
    if isinstance(losses, (list, tuple)) and losses and isinstance(losses[0], LossRecord):
        losses = [r.loss for r in losses]
    L = np.asarray(losses, dtype=float)
    w = np.asarray(w.weights if isinstance(w, cal.WeightVector) else w, dtype=float)
    if L.shape != w.shape:
        raise ValueError(f"{L.size} losses but {w.size} weights")
    return math.sqrt(float(np.dot(w, L)))


def cv_rmse(losses) -> float:
    return weighted_rmse(losses, cal.uniform_weights(len(losses)))


def rmse_against(z, pred) -> float:
    err = np.asarray(z, dtype=float) - np.asarray(pred, dtype=float)
    return math.sqrt(float(np.mean(err * err)))


def deployment_rmse(model_spec: ModelSpec, data: Dataset, world, seed=None) -> float:
    """Fit on the full sample and score against the true field on every grid node."""
    names = data.covariate_names
    fitted = fit_model(model_spec, data, seed)
    return rmse_against(world.z, fitted.predict(world.coords, world.covariates(names), names))


def model_based_rmse(model: FittedModel, grid_coords, grid_X, names: Sequence[str]) -> float:
    """Root mean kriging variance over the target grid."""
    _, var = model.predict_with_variance(grid_coords, grid_X, names)
    if var is None:
        raise ValueError("model provides no predictive variance")
    return math.sqrt(float(np.mean(var)))


@dataclass(frozen=True)
class EstimatorSettings:
    """Tuning of task generators and weighting rules shared by all estimators."""

    k: int = 10
    n_tasks: int = 500
    min_train_frac: float = 0.8
    n_bins: int = 5
    fine_bins: int = 10
    shrinkage: float = 0.2
    merge_empty_bins: bool = False
    accept_unconverged: bool = False
    base_variables: tuple = ("x1", DISTANCE)
    buffer_radii: str = "target"  # "uniform": radius ~ U(0, r_max); "target": match deployment distances
    extended_variables: tuple | None = None  # None: every covariate plus d

    def __post_init__(self):
        if self.buffer_radii not in ("uniform", "target"):
            raise ValueError(f"buffer_radii must be 'uniform' or 'target', got {self.buffer_radii!r}")

    def buffer_target(self, target) -> np.ndarray | None:
        return target.d if self.buffer_radii == "target" else None

    def extended(self, covariate_names: Sequence[str]) -> tuple:
        if self.extended_variables is not None:
            return tuple(self.extended_variables)
        return tuple(covariate_names) + (DISTANCE,)

    def rule(self, name: str, covariate_names: Sequence[str]):
        """(variables, n_bins, shrinkage) of a raking rule."""
        ext = self.extended(covariate_names)
        return {
            "dwcv": ((DISTANCE,), self.n_bins, 0.0),
            "twcv": (tuple(self.base_variables), self.n_bins, 0.0),
            "twcv_fine": (tuple(self.base_variables), self.fine_bins, self.shrinkage),
            "twcv_extended": (ext, self.n_bins, self.shrinkage),
            "twcv_extended_fine": (ext, self.fine_bins, self.shrinkage),
        }[name]


@dataclass
class WeightOutcome:
    estimator: str
    tasks: taskgen.TaskSet | None
    weights: cal.WeightVector | None = None
    raw: cal.WeightVector | None = None
    diagnostics: dict = field(default_factory=dict)
    note: str = ""


def estimator_weights(label: str, tasks: taskgen.TaskSet, target: TargetTaskSet,
                      settings: EstimatorSettings) -> tuple:
    """(raw, final) weights of a CV estimator over ``tasks``."""
    rule = ESTIMATORS[label][1]
    if rule == "uniform":
        w = cal.uniform_weights(len(tasks))
        return w, w
    if rule == "iwcv":
        cands = settings.extended(target.covariate_names)
        val = np.column_stack([tasks.values(v) for v in cands])
        tgt = np.column_stack([target.values(v) for v in cands])
        model = forward_bic_logistic(val, tgt, cands)
        sel = [cands.index(v) for v in model.selected_variables]
        w = importance_weights(model, val[:, sel])
        return w, w
    variables, n_bins, lam = settings.rule(rule, target.covariate_names)
    return cal.calibration_weights({v: tasks.values(v) for v in variables}, target, variables,
                                   n_bins=n_bins, shrinkage=lam, merge_empty=settings.merge_empty_bins,
                                   accept_unconverged=settings.accept_unconverged)


def _reason(exc: Exception) -> str:
    return f"{type(exc).__name__}: {exc}".replace("\n", " ")


def estimate_risks(data: Dataset, grid_coords, grid_X, suite: Sequence[str], models: Sequence[ModelSpec],
                   settings: EstimatorSettings = EstimatorSettings(), seed=None):
    """Run every estimator in ``suite`` for every model.

    Returns ``(results, weights, fitted)``: one EstimatorResult per
    (model, estimator) with the deployment RMSE left as NaN, the
    WeightOutcome of every CV estimator, and the full-sample fit per model.
    Raises ReplicateError when more than 5% of one generator's tasks fail.
    """
    unknown = [s for s in suite if s not in ESTIMATORS]
    if unknown:
        raise ValueError(f"unknown estimator(s) {', '.join(unknown)}; valid: {', '.join(ESTIMATORS)}")
    ss = _as_seedseq(seed)
    names = data.covariate_names
    grid_X = np.asarray(grid_X, dtype=float)
    target = build_deployment_tasks(grid_coords, grid_X, data.coords, names)

    task_sets: dict = {}
    gen_errors: dict = {}
    for gi, gen in enumerate(taskgen.GENERATORS):
        if not any(ESTIMATORS[s][0] == gen for s in suite):
            continue
        try:
            rng = np.random.default_rng(child_seed(ss, 0, gi))
            task_sets[gen] = taskgen.generate(gen, data, rng, k=settings.k, n_tasks=settings.n_tasks,
                                              min_train_frac=settings.min_train_frac,
                                              target_d=settings.buffer_target(target))
        except (ValueError, RuntimeError) as exc:
            gen_errors[gen] = _reason(exc)

    weights: dict = {}
    for label in suite:
        gen = ESTIMATORS[label][0]
        if gen is None:
            continue
        if gen in gen_errors:
            weights[label] = WeightOutcome(label, None, note=gen_errors[gen])
            continue
        ts = task_sets[gen]
        try:
            raw, w = estimator_weights(label, ts, target, settings)
        except (ValueError, RuntimeError) as exc:
            weights[label] = WeightOutcome(label, ts, note=_reason(exc))
            continue
        diag = cal.weight_diagnostics(ts.target_indices, w, data.n)
        notes = []
        if raw.info.get("merged_bins"):
            notes.append(f"{raw.info['merged_bins']} empty bins merged")
        if raw.info.get("converged") is False:
            notes.append(f"raking unconverged (max margin deviation {raw.max_margin_residual:.3g})")
        weights[label] = WeightOutcome(label, ts, w, raw, diag, "; ".join(notes))

    results: list = []
    fitted: dict = {}
    for mi, spec in enumerate(models):
        model = fit_model(spec, data, child_seed(ss, 1, mi))
        fitted[spec.kind] = model
        losses: dict = {}
        for gi, gen in enumerate(taskgen.GENERATORS):
            if gen in task_sets and any(ESTIMATORS[s][0] == gen and weights[s].weights is not None
                                        for s in suite):
                recs = cv_losses(spec, task_sets[gen], data, child_seed(ss, 2, mi, gi))
                n_failed = sum(r.failed for r in recs)
                if n_failed > MAX_FAILURE_RATE * len(recs):
                    raise ReplicateError(f"{spec.kind}: {n_failed} of {len(recs)} {gen} tasks failed")
                losses[gen] = recs
        for label in suite:
            gen, rule = ESTIMATORS[label]
            if rule == "model":
                results.append(_model_based(label, spec, model, grid_coords, grid_X, names))
                continue
            wo = weights[label]
            if wo.weights is None:
                results.append(EstimatorResult(label, spec.kind, float("nan"), note=wo.note))
                continue
            recs = losses[gen]
            ok = np.array([not r.failed for r in recs])
            w = wo.weights.weights
            L = np.array([r.loss for r in recs])
            if not ok.all():
                w = w[ok] / w[ok].sum()
                L = L[ok]
            results.append(EstimatorResult(label, spec.kind, weighted_rmse(L, w),
                                           ess_fraction=wo.diagnostics["ess_fraction"],
                                           p95_weight=wo.diagnostics["p95_relative_weight"],
                                           n_failed_tasks=int((~ok).sum()), note=wo.note))
    return results, weights, fitted


def _model_based(label, spec, model, grid_coords, grid_X, names) -> EstimatorResult:
    if label == "oob":
        if spec.kind != "rf":
            return EstimatorResult(label, spec.kind, float("nan"), note="not applicable")
        mse, skipped = rf_oob_mse(model.model)
        note = f"{skipped} cases never out of bag" if skipped else ""
        return EstimatorResult(label, spec.kind, math.sqrt(mse), note=note)
    if not spec.is_kriging:
        return EstimatorResult(label, spec.kind, float("nan"), note="not applicable")
    return EstimatorResult(label, spec.kind, model_based_rmse(model, grid_coords, grid_X, names))
