"""Prediction models: random forest and (heteroskedastic) regression-kriging."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from ..core import Dataset
from .forest import ForestModel, fit_rf, rf_oob_mse, rf_predict
from .kriging import KrigingModel, fit_rk, krige_predict
from .trend import TrendModel, fit_ols, forward_bic
from .variogram import (EmpiricalSemivariogram, SemivariogramModel,
                        cressie_semivariogram, fit_exponential_svgm)

MODEL_KINDS = ("rf", "rk", "hrk")


@dataclass(frozen=True)
class ModelSpec:
    """How to fit one of the supported models on a training subset."""

    kind: str = "rf"
    predictors: tuple = ("x1", "x2")
    n_trees: int = 500
    mtry: int | None = None
    min_node_size: int = 5
    variance_covariate: str | None = "x1"
    select_trend: bool = False

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model {self.kind!r}; valid models: {', '.join(MODEL_KINDS)}")
        object.__setattr__(self, "predictors", tuple(self.predictors))
        if self.kind == "hrk" and not self.variance_covariate:
            raise ValueError("hrk needs a variance_covariate")

    @property
    def is_kriging(self) -> bool:
        return self.kind in ("rk", "hrk")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictors"] = list(self.predictors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def _pick(X: np.ndarray, names: Sequence[str], wanted: Sequence[str]) -> np.ndarray:
    names = list(names)
    missing = [w for w in wanted if w not in names]
    if missing:
        raise ValueError(f"missing covariate(s) {', '.join(missing)}")
    return X[:, [names.index(w) for w in wanted]] if wanted else np.empty((X.shape[0], 0))


@dataclass(frozen=True, eq=False)
class FittedModel:
    spec: ModelSpec
    model: object

    def predict(self, coords, X, names: Sequence[str]) -> np.ndarray:
        return self.predict_with_variance(coords, X, names)[0]

    def predict_with_variance(self, coords, X, names: Sequence[str]):
        X = np.asarray(X, dtype=float).reshape(np.asarray(coords).reshape(-1, 2).shape[0], -1)
        if self.spec.kind == "rf":
            return self.model.predict(_pick(X, names, self.spec.predictors)), None
        km: KrigingModel = self.model
        Xt = _pick(X, names, km.trend.selected_variables)
        v = None
        if km.variance_model is not None:
            v = _pick(X, names, [km.variance_model.covariate])[:, 0]
        return km.predict(coords, Xt, v)


def fit_model(spec: ModelSpec, data: Dataset, seed=None) -> FittedModel:
    if spec.kind == "rf":
        return FittedModel(spec, fit_rf(data.columns(spec.predictors), data.response,
                                        n_trees=spec.n_trees, mtry=spec.mtry,
                                        min_node_size=spec.min_node_size, rng=seed))
    het = spec.kind == "hrk"
    return FittedModel(spec, fit_rk(data, spec.predictors, heteroskedastic=het,
                                    variance_covariate=spec.variance_covariate if het else None,
                                    select_trend=spec.select_trend))


__all__ = [
    "MODEL_KINDS", "ModelSpec", "FittedModel", "fit_model",
    "ForestModel", "fit_rf", "rf_predict", "rf_oob_mse",
    "KrigingModel", "fit_rk", "krige_predict",
    "TrendModel", "fit_ols", "forward_bic",
    "EmpiricalSemivariogram", "SemivariogramModel", "cressie_semivariogram", "fit_exponential_svgm",
]
