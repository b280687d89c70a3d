"""Robust empirical semivariogram and exponential model fitting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import _as_coords, distance_matrix

N_BINS = 15


@dataclass(frozen=True, eq=False)
class EmpiricalSemivariogram:
    lags: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    max_lag: float
    variance: float

    def __len__(self) -> int:
        return self.lags.shape[0]


@dataclass(frozen=True)
class SemivariogramModel:
    nugget: float
    partial_sill: float
    range: float
    model: str = "exponential"
    converged: bool = True
    identified: bool = True
    iterations: int = 0

    def __post_init__(self):
        if self.nugget < 0 or self.partial_sill < 0:
            raise ValueError("nugget and partial sill must be non-negative")
        if not self.range > 0:
            raise ValueError("range must be positive")

    @property
    def sill(self) -> float:
        return self.nugget + self.partial_sill

    def gamma(self, h):
        h = np.asarray(h, dtype=float)
        out = self.nugget + self.partial_sill * (1.0 - np.exp(-h / self.range))
        return np.where(h > 0, out, 0.0)

    def covariance(self, h):
        """Covariance of the spatially correlated part, ``psill * exp(-h / range)``."""
        return self.partial_sill * np.exp(-np.asarray(h, dtype=float) / self.range)

    def summary(self) -> str:
        flag = "" if self.converged and self.identified else " [flagged]"
        return (f"exponential: nugget={self.nugget:.6g} psill={self.partial_sill:.6g} "
                f"range={self.range:.6g}{flag}")


def cressie_semivariogram(residuals, locations, max_lag: float | None = None,
                          n_bins: int = N_BINS) -> EmpiricalSemivariogram:
    """Cressie-Hawkins robust estimator over equal-width lag bins.

    ``max_lag`` defaults to half the largest pairwise distance. Each bin's lag
    is the mean distance of its pairs; empty bins are dropped.
    """
    r = np.asarray(residuals, dtype=float).reshape(-1)
    coords = _as_coords(locations)
    if r.shape[0] != coords.shape[0]:
        raise ValueError("residuals and locations are misaligned")
    if r.shape[0] < 10:
        raise ValueError(f"need at least 10 observations, got {r.shape[0]}")
    iu, ju = np.triu_indices(r.shape[0], k=1)
    h = distance_matrix(coords)[iu, ju]
    if max_lag is None:
        max_lag = 0.5 * float(h.max())
    keep = h <= max_lag
    if not max_lag > 0 or not np.any(keep):
        raise ValueError("no pairs within max_lag")
    h = h[keep]
    root = np.sqrt(np.abs(r[iu[keep]] - r[ju[keep]]))
    width = max_lag / n_bins
    b = np.clip(np.ceil(h / width).astype(int) - 1, 0, n_bins - 1)
    counts = np.bincount(b, minlength=n_bins)
    sum_h = np.bincount(b, weights=h, minlength=n_bins)
    sum_root = np.bincount(b, weights=root, minlength=n_bins)
    ok = counts > 0
    counts = counts[ok]
    lags = sum_h[ok] / counts
    mean_root = sum_root[ok] / counts
    two_gamma = mean_root ** 4 / (0.457 + 0.494 / counts)
    return EmpiricalSemivariogram(lags, 0.5 * two_gamma, counts, float(max_lag), float(np.var(r)))


def _exp_model(theta, h):
    nug, ps, rng = theta
    e = np.exp(-h / rng)
    return nug + ps * (1.0 - e), e


def fit_exponential_svgm(emp: EmpiricalSemivariogram, tol: float = 1e-8,
                         max_iter: int = 200) -> SemivariogramModel:
    """Weighted least-squares fit of an exponential model, weights ``N_j / h_j^2``.

    Levenberg-Marquardt iterations in (nugget, partial sill, log range), with
    non-negativity enforced by projection. Range is kept within
    ``[1e-4, 10] * max_lag``. Returns the best iterate; ``converged`` is False
    when the iteration limit is hit, and ``identified`` is False when the
    fitted partial sill is negligible (range then carries no information).
    """
    if len(emp) < 3:
        raise ValueError("need at least 3 lag bins")
    h = np.maximum(emp.lags, 1e-12 * emp.max_lag)
    g = emp.gamma
    w = emp.counts / h ** 2
    w = w / w.sum()
    lo, hi = np.log(1e-4 * emp.max_lag), np.log(10.0 * emp.max_lag)

    nug = max(float(g[0]), 0.0)
    ps = max(emp.variance - nug, 1e-6 * max(emp.variance, float(g.max()), 1e-12))
    lr = float(np.clip(np.log(emp.max_lag / 3.0), lo, hi))

    def sse(t):
        pred, _ = _exp_model((t[0], t[1], np.exp(t[2])), h)
        d = g - pred
        return float(w @ (d * d))

    theta = np.array([nug, ps, lr])
    cur = sse(theta)
    mu = 1e-3
    converged = False
    it = 0
    scale = max(float(g.max()), 1e-12)
    for it in range(1, max_iter + 1):
        rng_ = np.exp(theta[2])
        pred, e = _exp_model((theta[0], theta[1], rng_), h)
        resid = g - pred
        J = np.column_stack([np.ones_like(h), 1.0 - e, -theta[1] * (h / rng_) * e])
        JW = J.T * w
        A = JW @ J
        grad = JW @ resid
        accepted = False
        while mu < 1e12:
            M = A + mu * np.diag(np.diag(A) + 1e-12 * scale ** 2)
            try:
                step = np.linalg.solve(M, grad)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            cand = theta + step
            cand[0] = max(cand[0], 0.0)
            cand[1] = max(cand[1], 0.0)
            cand[2] = min(max(cand[2], lo), hi)
            new = sse(cand)
            if new <= cur:
                change = np.abs(np.array([cand[0] - theta[0], cand[1] - theta[1],
                                          np.exp(cand[2]) - rng_]))
                theta, cur = cand, new
                mu = max(mu / 10, 1e-12)
                accepted = True
                break
            mu *= 10
        if not accepted or change.max() < tol:
            converged = True
            break
    identified = theta[1] > 1e-6 * max(theta[0] + theta[1], 1e-12)
    return SemivariogramModel(float(theta[0]), float(theta[1]), float(np.exp(theta[2])),
                              converged=converged and identified, identified=bool(identified),
                              iterations=it)
