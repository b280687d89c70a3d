"""Regression-kriging with an optional heteroskedastic residual variance model.

Residuals from the linear trend are kriged by simple kriging with known zero
mean. Trend-estimation uncertainty and semivariogram-estimation uncertainty
are not propagated into the kriging variance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..core import Dataset, _as_coords, distance_matrix
from .trend import TrendModel, fit_ols, forward_bic
from .variogram import (N_BINS, SemivariogramModel, cressie_semivariogram,
                        fit_exponential_svgm)

VARIANCE_FLOOR_FRACTION = 0.05


class KrigingError(RuntimeError):
    pass


@dataclass(frozen=True)
class VarianceModel:
    """Residual variance ``max(a + b * v, floor)`` in a single covariate ``v``."""

    covariate: str
    a: float
    b: float
    floor: float

    def __call__(self, v) -> np.ndarray:
        return np.maximum(self.a + self.b * np.asarray(v, dtype=float), self.floor)


def fit_variance_model(residuals, v, covariate: str) -> VarianceModel:
    r = np.asarray(residuals, dtype=float)
    ols = fit_ols(np.asarray(v, dtype=float).reshape(-1, 1), r * r, [covariate])
    floor = max(VARIANCE_FLOOR_FRACTION * float(np.var(r)), 1e-12)
    return VarianceModel(covariate, ols.intercept, float(ols.coefficients[0]), floor)


def _factorize(K: np.ndarray, scale: float):
    jitter = 0.0
    while True:
        try:
            return cho_factor(K + jitter * np.eye(K.shape[0]), lower=True, check_finite=False)
        except LinAlgError:
            jitter = 1e-10 * scale if jitter == 0.0 else jitter * 10
            if jitter > 1e-6 * scale * (1 + 1e-9):
                raise KrigingError("kriging system singular after jitter escalation") from None


@dataclass(frozen=True, eq=False)
class KrigingModel:
    trend: TrendModel
    svgm: SemivariogramModel
    variance_model: VarianceModel | None
    coords: np.ndarray
    residuals: np.ndarray
    factor: tuple | None
    alpha: np.ndarray

    @property
    def heteroskedastic(self) -> bool:
        return self.variance_model is not None

    def _cov(self, h):
        return self.svgm.covariance(h)

    def predict(self, locations, trend_covariates, variance_covariate=None,
                new_observation: bool = True):
        """Kriging mean and variance at one or more locations.

        ``trend_covariates`` has one column per selected trend variable. With
        ``new_observation`` the nugget is added to the variance (prediction of
        an observation rather than of the smooth signal).
        """
        loc = _as_coords(locations)
        X = np.asarray(trend_covariates, dtype=float).reshape(loc.shape[0], -1)
        mean = self.trend.predict(X)
        s = self.svgm
        if self.factor is None:
            k_alpha = np.zeros(loc.shape[0])
            reduction = np.zeros(loc.shape[0])
        else:
            k = self._cov(distance_matrix(loc, self.coords))
            k_alpha = k @ self.alpha
            reduction = np.einsum("ij,ji->i", k, cho_solve(self.factor, k.T, check_finite=False))
        var = np.maximum(s.partial_sill - reduction, 0.0)
        if new_observation:
            var = var + s.nugget
        if self.variance_model is not None:
            if variance_covariate is None:
                raise ValueError(f"heteroskedastic model needs values of {self.variance_model.covariate!r}")
            sig2 = self.variance_model(np.asarray(variance_covariate, dtype=float).reshape(-1))
            mean = mean + np.sqrt(sig2) * k_alpha
            var = var * sig2
        else:
            mean = mean + k_alpha
        return mean, var

    def summary(self) -> str:
        lines = ["trend: " + self.trend.summary(), "svgm: " + self.svgm.summary()]
        if self.variance_model is not None:
            vm = self.variance_model
            lines.append(f"variance: max({vm.a:.6g} + {vm.b:.6g}*{vm.covariate}, {vm.floor:.6g})")
        return "\n".join(lines)


def krige_from_residuals(trend: TrendModel, svgm: SemivariogramModel, coords, residuals,
                         variance_model: VarianceModel | None = None) -> KrigingModel:
    """Assemble the simple-kriging system for given (standardised) residuals."""
    coords = _as_coords(coords)
    r = np.asarray(residuals, dtype=float).reshape(-1)
    scale = svgm.sill
    if scale <= 1e-14:
        return KrigingModel(trend, svgm, variance_model, coords, r, None, np.zeros_like(r))
    K = svgm.covariance(distance_matrix(coords))
    K[np.diag_indices_from(K)] += svgm.nugget
    factor = _factorize(K, scale)
    alpha = cho_solve(factor, r, check_finite=False)
    return KrigingModel(trend, svgm, variance_model, coords, r, factor, alpha)


def fit_rk(data: Dataset, trend_vars: Sequence[str], heteroskedastic: bool = False,
           variance_covariate: str | None = None, select_trend: bool = False,
           n_bins: int = N_BINS) -> KrigingModel:
    """Fit regression-kriging (or its heteroskedastic variant) to ``data``.

    With ``select_trend`` the trend variables are chosen by forward BIC from
    ``trend_vars``; otherwise all of them enter by OLS.
    """
    X = data.columns(trend_vars)
    y = data.response
    trend = forward_bic(X, y, trend_vars) if select_trend else fit_ols(X, y, trend_vars)
    resid = y - trend.predict(data.columns(trend.selected_variables))
    vm = None
    work = resid
    if heteroskedastic:
        if variance_covariate is None:
            raise ValueError("heteroskedastic kriging needs a variance covariate")
        vm = fit_variance_model(resid, data.column(variance_covariate), variance_covariate)
        work = resid / np.sqrt(vm(data.column(variance_covariate)))
    emp = cressie_semivariogram(work, data.coords, n_bins=n_bins)
    svgm = fit_exponential_svgm(emp)
    return krige_from_residuals(trend, svgm, data.coords, work, vm)


def krige_predict(model: KrigingModel, location, covariates, variance_covariate=None):
    """Single-location convenience wrapper returning ``(mean, variance)``."""
    m, v = model.predict(location, np.asarray(covariates, dtype=float).reshape(1, -1),
                         None if variance_covariate is None else [variance_covariate])
    return float(m[0]), float(v[0])
