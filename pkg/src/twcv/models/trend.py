"""Linear trend models: ordinary least squares and forward selection by BIC."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class RankDeficiencyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TrendModel:
    selected_variables: tuple
    intercept: float
    coefficients: np.ndarray
    residual_variance: float
    rss: float
    n: int

    def predict(self, X) -> np.ndarray:
        """Predict from a matrix whose columns are ``selected_variables`` in order."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1) if len(self.selected_variables) else X.reshape(-1, 0)
        if X.shape[1] != len(self.selected_variables):
            raise ValueError(f"expected {len(self.selected_variables)} columns, got {X.shape[1]}")
        return self.intercept + X @ self.coefficients

    def summary(self) -> str:
        terms = " ".join(f"{c:+.6g}*{v}" for v, c in zip(self.selected_variables, self.coefficients))
        return f"z = {self.intercept:.6g} {terms}  (sigma2={self.residual_variance:.6g}, n={self.n})"


def _collinear_columns(Xc: np.ndarray, names: Sequence[str]) -> list:
    bad = []
    kept = np.empty((Xc.shape[0], 0))
    scale = max(1.0, float(np.abs(Xc).max(initial=0.0)))
    for j, name in enumerate(names):
        col = Xc[:, j:j + 1]
        cand = np.hstack([kept, col])
        if np.linalg.matrix_rank(cand, tol=1e-10 * scale * math.sqrt(Xc.shape[0])) < cand.shape[1]:
            bad.append(name)
        else:
            kept = cand
    return bad


def _lstsq(X: np.ndarray, y: np.ndarray):
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    coef, *_ = np.linalg.lstsq(Xc, y - ym, rcond=None)
    intercept = ym - xm @ coef
    resid = y - intercept - X @ coef
    return float(intercept), coef, float(resid @ resid)


def fit_ols(X, y, names: Sequence[str] | None = None) -> TrendModel:
    """Least-squares fit of ``y`` on an intercept plus the columns of ``X``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float).reshape(y.shape[0], -1)
    n, p = X.shape
    names = tuple(names) if names is not None else tuple(f"v{j + 1}" for j in range(p))
    if len(names) != p:
        raise ValueError("column names do not match X")
    if n <= p + 1:
        raise ValueError(f"need n > p + 1 observations (n={n}, p={p})")
    if p:
        bad = _collinear_columns(X - X.mean(axis=0), names)
        if bad:
            raise RankDeficiencyError(f"collinear columns: {', '.join(bad)}")
    intercept, coef, rss = _lstsq(X, y)
    return TrendModel(names, intercept, coef, rss / (n - p - 1), rss, n)


def bic_linear(rss: float, n: int, k: int) -> float:
    return n * math.log(max(rss, 1e-300) / n) + k * math.log(n)


def forward_bic(X, y, candidates: Sequence[str]) -> TrendModel:
    """Greedy forward selection; stops once no candidate lowers the BIC.

    Candidates that are collinear with the current selection are skipped, so
    duplicating an already-selected column leaves the result unchanged. Ties
    go to the earlier candidate.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float).reshape(y.shape[0], -1)
    candidates = tuple(candidates)
    if X.shape[1] != len(candidates):
        raise ValueError("candidate names do not match X")
    n = y.shape[0]
    tss = float(((y - y.mean()) ** 2).sum())
    selected: list[int] = []
    rss = tss
    best_bic = bic_linear(rss, n, 1)
    while len(selected) < len(candidates) and n > len(selected) + 2:
        if rss <= 1e-12 * max(tss, 1e-300):
            break
        step = None
        for j in range(len(candidates)):
            if j in selected:
                continue
            cols = selected + [j]
            Xs = X[:, cols]
            if _collinear_columns(Xs - Xs.mean(axis=0), [candidates[c] for c in cols]):
                continue
            _, _, r = _lstsq(Xs, y)
            b = bic_linear(r, n, len(cols) + 1)
            if b < best_bic and (step is None or b < step[0]):
                step = (b, j, r)
        if step is None:
            break
        best_bic, j, rss = step
        selected.append(j)
    names = [candidates[j] for j in selected]
    return fit_ols(X[:, selected], y, names)
