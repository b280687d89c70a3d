"""YAML run configuration shared by the CLI subcommands.

Layout (every key optional; ``RunConfig().to_yaml()`` prints the defaults)::

    master_seed: 1
    out_dir: out
    workers: 1
    scenario: {beta0, beta1, beta2, rho, n, design, grid_side, include_extra_predictors, bias_power}
    experiment: {replicates, suite, models, n_trees, predictors, exclude_sampled_nodes, settings: {...}}
    evaluate: {coord_columns, response_column, covariate_columns, balancing_variables,
               suite, models, n_trees, select_trend, variance_covariate, settings: {...}}

Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .core import DISTANCE
from .experiment import ExperimentConfig, config_from_dict, config_to_dict
from .models import MODEL_KINDS, ModelSpec
from .risk import ESTIMATORS, EstimatorSettings
from .simfield import ScenarioConfig

EVALUATE_SUITE = ("loocv", "random_cv", "lobo_cv", "buffered_cv", "dwcv", "twcv",
                  "iwcv_random", "iwcv_buffered", "oob", "kriging_variance")


def _check_keys(d: dict, cls, where: str):
    if not isinstance(d, dict):
        raise ValueError(f"{where} must be a mapping")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {where} keys: {', '.join(sorted(unknown))}")


def _settings_from(d) -> EstimatorSettings:
    d = dict(d or {})
    _check_keys(d, EstimatorSettings, "settings")
    for k in ("base_variables", "extended_variables"):
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return EstimatorSettings(**d)


def _settings_to(s: EstimatorSettings) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(s).items()}


@dataclass(frozen=True)
class EvaluateConfig:
    """How to run the estimators on a user dataset against a target grid.

    ``covariate_columns=None`` takes every column other than the coordinates
    and the response; ``balancing_variables=None`` balances all covariates;
    ``variance_covariate=None`` lets HRK use the first covariate.
    Coverage violations are hard errors here (no bin merging).
    """

    coord_columns: tuple = ("x", "y")
    response_column: str = "z"
    covariate_columns: tuple | None = None
    balancing_variables: tuple | None = None
    suite: tuple = EVALUATE_SUITE
    models: tuple = ("rf", "rk")
    n_trees: int = 500
    select_trend: bool = True
    variance_covariate: str | None = None
    settings: EstimatorSettings = field(default_factory=EstimatorSettings)

    def __post_init__(self):
        for k in ("coord_columns", "suite", "models"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
        for k in ("covariate_columns", "balancing_variables"):
            if getattr(self, k) is not None:
                object.__setattr__(self, k, tuple(getattr(self, k)))
        if len(self.coord_columns) != 2:
            raise ValueError("coord_columns needs exactly two names")
        bad = [s for s in self.suite if s not in ESTIMATORS]
        if bad:
            raise ValueError(f"unknown estimator(s) {', '.join(bad)}; valid: {', '.join(ESTIMATORS)}")
        bad = [m for m in self.models if m not in MODEL_KINDS]
        if bad:
            raise ValueError(f"unknown model(s) {', '.join(bad)}; valid: {', '.join(MODEL_KINDS)}")
        if DISTANCE in (self.balancing_variables or ()):
            raise ValueError("'d' is always balanced; list covariates only")

    def estimator_settings(self, covariates) -> EstimatorSettings:
        bal = tuple(self.balancing_variables if self.balancing_variables is not None else covariates)
        return replace(self.settings, base_variables=bal + (DISTANCE,),
                       extended_variables=bal + (DISTANCE,))

    def model_specs(self, covariates) -> list:
        covariates = tuple(covariates)
        var_cov = self.variance_covariate or covariates[0]
        return [ModelSpec(kind=m, predictors=covariates, n_trees=self.n_trees,
                          variance_covariate=var_cov, select_trend=self.select_trend)
                for m in self.models]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["settings"] = _settings_to(self.settings)
        return d

    @classmethod
    def from_dict(cls, d) -> "EvaluateConfig":
        d = dict(d or {})
        _check_keys(d, cls, "evaluate")
        if "settings" in d:
            d["settings"] = _settings_from(d["settings"])
        return cls(**d)


_EXPERIMENT_KEYS = tuple(f.name for f in fields(ExperimentConfig) if f.name not in ("scenario", "master_seed"))


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 1
    out_dir: str = "out"
    workers: int = 1
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def __post_init__(self):
        if int(self.master_seed) != self.master_seed or not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if int(self.workers) != self.workers or self.workers < 1:
            raise ValueError("workers must be an integer >= 1")
        # the experiment always runs the top-level scenario and seed
        exp = replace(self.experiment, scenario=self.scenario, master_seed=int(self.master_seed))
        object.__setattr__(self, "experiment", exp)

    def to_dict(self) -> dict:
        exp = config_to_dict(self.experiment)
        return {
            "master_seed": int(self.master_seed),
            "out_dir": str(self.out_dir),
            "workers": int(self.workers),
            "scenario": self.scenario.to_dict(),
            "experiment": {k: exp[k] for k in _EXPERIMENT_KEYS},
            "evaluate": self.evaluate.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        d = dict(d or {})
        _check_keys(d, cls, "top-level")
        scen = ScenarioConfig.from_dict(d.get("scenario") or {})
        exp_d = dict(d.get("experiment") or {})
        bad = set(exp_d) - set(_EXPERIMENT_KEYS)
        if bad:
            raise ValueError(f"unknown experiment keys: {', '.join(sorted(bad))}")
        seed = d.get("master_seed", 1)
        exp = config_from_dict({**exp_d, "scenario": scen.to_dict(), "master_seed": seed})
        return cls(master_seed=seed, out_dir=d.get("out_dir", "out"), workers=d.get("workers", 1),
                   scenario=scen, experiment=exp,
                   evaluate=EvaluateConfig.from_dict(d.get("evaluate") or {}))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        doc = yaml.safe_load(text)
        return cls.from_dict(doc or {})

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_yaml(fh.read())
