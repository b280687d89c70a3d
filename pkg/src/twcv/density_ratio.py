"""Importance weights from a deployment-vs-validation logistic classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .calibration import WeightVector, uniform_weights

SEPARATION_THRESHOLD = 15.0
RIDGE_FALLBACK = 1e-4
P_CLIP = 1e-6


@dataclass(frozen=True, eq=False)
class LogisticFit:
    """Coefficients on the standardised scale plus the standardisation itself."""

    intercept: float
    coef: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    separated: bool

    def linear_predictor(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.coef.size)
        return self.intercept + ((X - self.center) / self.scale) @ self.coef

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.linear_predictor(X))

    @property
    def coef_original(self) -> np.ndarray:
        return self.coef / self.scale

    @property
    def intercept_original(self) -> float:
        return float(self.intercept - (self.center / self.scale) @ self.coef)


def _loglik(eta: np.ndarray, y: np.ndarray) -> float:
    # log(1 + exp(eta)) computed stably
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def _irls(Z: np.ndarray, y: np.ndarray, ridge: float, tol: float, max_iter: int):
    n, k = Z.shape
    A = np.column_stack([np.ones(n), Z])
    beta = np.zeros(k + 1)
    ybar = y.mean()
    beta[0] = math.log(ybar / (1.0 - ybar))
    penalty = np.full(k + 1, ridge * n)
    penalty[0] = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = A @ beta
        p = expit(eta)
        w = np.maximum(p * (1.0 - p), 1e-12)
        H = (A.T * w) @ A + np.diag(penalty)
        g = A.T @ (y - p) - penalty * beta
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        beta = beta + step
        if np.abs(step).max() < tol:
            converged = True
            break
    return beta, it, converged


def fit_logistic(X, y, tol: float = 1e-8, max_iter: int = 100) -> LogisticFit:
    """Maximum-likelihood logistic regression by IRLS on standardised columns.

    If any standardised slope exceeds 15 in magnitude the data are treated
    as (quasi-)separated: the fit is flagged and redone with a small ridge
    penalty (1e-4 per observation) so the coefficients stay finite.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float).reshape(y.shape[0], -1)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("logistic regression needs both classes present")
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Z = (X - center) / scale
    beta, it, conv = _irls(Z, y, 0.0, tol, max_iter)
    separated = bool(not np.all(np.isfinite(beta)) or
                     (beta.size > 1 and np.abs(beta[1:]).max() > SEPARATION_THRESHOLD))
    if separated:
        beta, it, conv = _irls(Z, y, RIDGE_FALLBACK, tol, max_iter)
    eta = beta[0] + Z @ beta[1:]
    return LogisticFit(float(beta[0]), beta[1:].copy(), center, scale, _loglik(eta, y), it, conv, separated)


@dataclass(frozen=True, eq=False)
class LogisticModel:
    selected_variables: tuple
    fit: LogisticFit
    n_target: int
    n_val: int
    bic: float

    def predict_proba(self, X_selected) -> np.ndarray:
        if not self.selected_variables:
            X_selected = np.asarray(X_selected, dtype=float).reshape(-1, 0)
        return self.fit.predict_proba(X_selected)


def forward_bic_logistic(val_X, target_X, candidates: Sequence[str]) -> LogisticModel:
    """Forward selection of classifier inputs by BIC on the pooled tasks.

    Deployment tasks are labelled 1 and validation tasks 0. Ties go to the
    earlier candidate.
    """
    candidates = tuple(candidates)
    val_X = np.asarray(val_X, dtype=float)
    target_X = np.asarray(target_X, dtype=float)
    val_X = val_X.reshape(val_X.shape[0], len(candidates))
    target_X = target_X.reshape(target_X.shape[0], len(candidates))
    for arr in (val_X, target_X):
        if not np.all(np.isfinite(arr)):
            raise ValueError("candidate columns must be finite")
    X = np.vstack([target_X, val_X])
    y = np.concatenate([np.ones(target_X.shape[0]), np.zeros(val_X.shape[0])])
    n = y.shape[0]
    selected: list[int] = []
    fit = fit_logistic(X[:, []], y)
    best = -2.0 * fit.loglik + math.log(n)
    while len(selected) < len(candidates):
        step = None
        for j in range(len(candidates)):
            if j in selected:
                continue
            cand = fit_logistic(X[:, selected + [j]], y)
            bic = -2.0 * cand.loglik + (len(selected) + 2) * math.log(n)
            if bic < best and (step is None or bic < step[0]):
                step = (bic, j, cand)
        if step is None:
            break
        best, j, fit = step
        selected.append(j)
    return LogisticModel(tuple(candidates[j] for j in selected), fit,
                         target_X.shape[0], val_X.shape[0], best)


def importance_weights(model: LogisticModel, val_X_selected) -> WeightVector:
    """Normalised density-ratio weights from the fitted odds.

    The odds are multiplied by ``n_val / n_target`` to undo the class
    imbalance of the pooled sample; with no selected inputs the weights are
    exactly uniform.
    """
    X = np.asarray(val_X_selected, dtype=float)
    n = X.shape[0]
    if not model.selected_variables:
        return uniform_weights(n)
    p = np.clip(model.predict_proba(X.reshape(n, -1)), P_CLIP, 1.0 - P_CLIP)
    raw = p / (1.0 - p) * (model.n_val / model.n_target)
    return WeightVector(raw / raw.sum(), info={"selected": model.selected_variables})
