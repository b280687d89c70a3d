"""Calibration weighting of validation tasks towards deployment-task margins.

Weights follow the sum-to-one convention throughout. Balancing variables are
discretised at quantiles of the deployment distribution; bins are
right-closed and out-of-range validation values fall into the outermost bins.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DISTANCE, TargetTaskSet, TaskDescriptor


class CoverageError(ValueError):
    """A bin with positive target margin holds no validation task."""

    def __init__(self, empty: list):
        self.empty = empty
        listing = "; ".join(f"{v} bin {b} {rng}" for v, b, rng in empty)
        super().__init__(f"insufficient task coverage: empty bins {listing}")


class RakingError(RuntimeError):
    """IPF failed; ``last`` holds the normalised final iterate when there is one."""

    def __init__(self, message: str, last: "WeightVector | None" = None):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True, eq=False)
class BinningScheme:
    variables: tuple
    edges: tuple  # per variable: interior edges, strictly increasing

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "edges", tuple(np.asarray(e, dtype=float) for e in self.edges))
        if len(self.variables) != len(self.edges):
            raise ValueError("one edge vector per variable is required")
        for v, e in zip(self.variables, self.edges):
            if e.size < 1 or np.any(np.diff(e) <= 0):
                raise ValueError(f"edges for {v!r} must be non-empty and strictly increasing")

    @property
    def n_bins(self) -> tuple:
        return tuple(e.size + 1 for e in self.edges)

    def interval(self, var_pos: int, b: int) -> str:
        e = self.edges[var_pos]
        lo = "-inf" if b == 0 else f"{e[b - 1]:.6g}"
        hi = "inf" if b == e.size else f"{e[b]:.6g}"
        return f"({lo}, {hi}]"

    def codes(self, columns: Sequence[np.ndarray]) -> np.ndarray:
        """Bin index per row and variable, shape ``(n, n_variables)``."""
        cols = [np.asarray(c, dtype=float) for c in columns]
        if len(cols) != len(self.variables):
            raise ValueError("one column per balancing variable is required")
        if not cols:
            return np.empty((0, 0), dtype=int)
        for v, c in zip(self.variables, cols):
            if not np.all(np.isfinite(c)):
                raise ValueError(f"non-finite values in balancing variable {v!r}")
        return np.column_stack([np.searchsorted(e, c, side="left") for e, c in zip(self.edges, cols)])


@dataclass(frozen=True, eq=False)
class MarginVector:
    variables: tuple
    proportions: tuple  # per variable: bin proportions

    def __post_init__(self):
        props = tuple(np.asarray(p, dtype=float) for p in self.proportions)
        object.__setattr__(self, "proportions", props)
        object.__setattr__(self, "variables", tuple(self.variables))
        for v, p in zip(self.variables, props):
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"margins of {v!r} must be non-negative and sum to 1")

    @property
    def blocks(self) -> tuple:
        return tuple(p.size for p in self.proportions)


@dataclass(frozen=True, eq=False)
class WeightVector:
    weights: np.ndarray
    max_margin_residual: float = 0.0
    iterations: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 (sum={w.sum()!r})")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.size

    @property
    def ess(self) -> float:
        return ess(self)

    @property
    def max(self) -> float:
        return float(self.weights.max() * self.weights.size)

    @property
    def p95(self) -> float:
        return float(np.quantile(self.weights, 0.95) * self.weights.size)


def uniform_weights(n: int) -> WeightVector:
    return WeightVector(np.full(n, 1.0 / n))


def normalized(raw) -> WeightVector:
    raw = np.asarray(raw, dtype=float)
    return WeightVector(raw / raw.sum())


def make_bins(target_tasks: TargetTaskSet, variables: Sequence[str], n_bins: int = 5) -> BinningScheme:
    """Quantile bins of each balancing variable over the deployment tasks.

    Duplicate quantiles collapse; a variable left with a single bin is
    dropped from balancing with a warning.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    probs = np.arange(1, n_bins) / n_bins
    kept, edges = [], []
    for v in variables:
        vals = target_tasks.values(v)
        e = np.unique(np.quantile(vals, probs))
        # an edge at the maximum would leave the top bin empty
        e = e[e < vals.max()]
        if e.size == 0:
            warnings.warn(f"balancing variable {v!r} is constant over the target domain; dropped",
                          stacklevel=2)
            continue
        kept.append(v)
        edges.append(e)
    return BinningScheme(tuple(kept), tuple(edges))


def encode(descriptor: TaskDescriptor, bins: BinningScheme, covariate_names: Sequence[str]) -> np.ndarray:
    """One-hot indicator vector over all bins of all balancing variables."""
    names = list(covariate_names)
    if len(descriptor.covariates) != len(names):
        raise ValueError("descriptor does not match covariate names")
    cols = []
    for v in bins.variables:
        if v == DISTANCE:
            cols.append(np.array([descriptor.d]))
        elif v in names:
            cols.append(np.array([descriptor.covariates[names.index(v)]]))
        else:
            raise ValueError(f"descriptor lacks balancing variable {v!r}")
    return indicators(bins.codes(cols), bins.n_bins)[0]


def indicators(codes: np.ndarray, blocks: Sequence[int]) -> np.ndarray:
    codes = np.asarray(codes, dtype=int).reshape(-1, len(blocks))
    out = np.zeros((codes.shape[0], int(sum(blocks))))
    offset = 0
    rows = np.arange(codes.shape[0])
    for j, k in enumerate(blocks):
        out[rows, offset + codes[:, j]] = 1.0
        offset += k
    return out


def codes_from_indicators(ind: np.ndarray, blocks: Sequence[int]) -> np.ndarray:
    ind = np.asarray(ind, dtype=float)
    if ind.ndim != 2 or ind.shape[1] != sum(blocks):
        raise ValueError("indicator matrix does not match the margin blocks")
    out = np.empty((ind.shape[0], len(blocks)), dtype=int)
    offset = 0
    for j, k in enumerate(blocks):
        part = ind[:, offset:offset + k]
        if not np.all(part.sum(axis=1) == 1):
            raise ValueError("each task needs exactly one indicator per variable")
        out[:, j] = part.argmax(axis=1)
        offset += k
    return out


def target_margins(target_tasks: TargetTaskSet, bins: BinningScheme) -> MarginVector:
    codes = bins.codes([target_tasks.values(v) for v in bins.variables])
    props = []
    for j, k in enumerate(bins.n_bins):
        counts = np.bincount(codes[:, j], minlength=k).astype(float)
        props.append(counts / counts.sum())
    return MarginVector(bins.variables, tuple(props))


def _empty_bins(codes: np.ndarray, margins: MarginVector) -> list:
    empty = []
    for j, p in enumerate(margins.proportions):
        counts = np.bincount(codes[:, j], minlength=p.size)
        for b in np.flatnonzero((counts == 0) & (p > 0)):
            empty.append((j, int(b)))
    return empty


def merge_empty_bins(codes: np.ndarray, margins: MarginVector) -> MarginVector:
    """Move the target mass of uncovered bins to the nearest covered bin.

    Bins are ordinal, so "nearest" is by bin index; ties go to the lower bin.
    """
    props = []
    for j, p in enumerate(margins.proportions):
        counts = np.bincount(codes[:, j], minlength=p.size)
        covered = np.flatnonzero(counts > 0)
        if covered.size == 0:
            raise CoverageError([(margins.variables[j], 0, "(all bins)")])
        new = np.zeros_like(p)
        for b in range(p.size):
            nearest = covered[np.argmin(np.abs(covered - b))]
            new[nearest] += p[b]
        props.append(new / new.sum())
    return MarginVector(margins.variables, tuple(props))


def rake(task_indicators, margins: MarginVector, tol: float = 1e-8, max_iter: int = 1000,
         merge_empty: bool = False, bins: BinningScheme | None = None) -> WeightVector:
    """Iterative proportional fitting of task weights to the target margins.

    ``task_indicators`` is the one-hot matrix produced by :func:`indicators`
    (an integer code matrix of shape ``(n_tasks, n_variables)`` is accepted
    as well). Raises :class:`CoverageError` when a bin with positive target
    margin has no task, unless ``merge_empty`` is set.
    """
    arr = np.asarray(task_indicators)
    blocks = margins.blocks
    if arr.ndim == 2 and arr.shape[1] == sum(blocks) and arr.shape[1] != len(blocks):
        codes = codes_from_indicators(arr, blocks)
    else:
        codes = np.asarray(arr, dtype=int).reshape(-1, len(blocks))
    n = codes.shape[0]
    if n == 0:
        raise ValueError("no validation tasks")
    for j, k in enumerate(blocks):
        if codes.size and (codes[:, j].min() < 0 or codes[:, j].max() >= k):
            raise ValueError(f"bin codes of {margins.variables[j]!r} out of range")
    empty = _empty_bins(codes, margins)
    if empty:
        if not merge_empty:
            raise CoverageError([
                (margins.variables[j], b, bins.interval(j, b) if bins is not None else "")
                for j, b in empty])
        margins = merge_empty_bins(codes, margins)
    w = np.full(n, 1.0 / n)
    if not blocks:
        return WeightVector(w, 0.0, 0, {"merged_bins": len(empty)})
    dev = np.inf
    for it in range(1, max_iter + 1):
        for j, p in enumerate(margins.proportions):
            cur = np.bincount(codes[:, j], weights=w, minlength=p.size)
            factor = np.divide(p, cur, out=np.zeros_like(p), where=cur > 0)
            w = w * factor[codes[:, j]]
        dev = max(float(np.abs(np.bincount(codes[:, j], weights=w, minlength=p.size) - p).max())
                  for j, p in enumerate(margins.proportions))
        if dev < tol:
            break
    else:
        last = None
        if w.sum() > 0:
            last = WeightVector(w / w.sum(), dev, max_iter, {"merged_bins": len(empty), "converged": False})
        raise RakingError(f"raking did not converge in {max_iter} iterations "
                          f"(max margin deviation {dev:.3g})", last)
    total = w.sum()
    if not total > 0:
        raise RakingError("raking drove all weights to zero")
    w = w / total
    resid = margin_residual(codes, w, margins)
    return WeightVector(w, resid, it, {"merged_bins": len(empty)})


def margin_residual(codes: np.ndarray, w: np.ndarray, margins: MarginVector) -> float:
    if not margins.blocks:
        return 0.0
    return max(float(np.abs(np.bincount(codes[:, j], weights=w, minlength=p.size) - p).max())
               for j, p in enumerate(margins.proportions))


def shrink(w: WeightVector, lam: float) -> WeightVector:
    """Shrink towards uniform: ``(1 - lam) * w + lam / n`` (mean-preserving)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"shrinkage must lie in [0, 1], got {lam}")
    n = len(w)
    out = (1.0 - lam) * w.weights + lam / n
    return WeightVector(out / out.sum(), w.max_margin_residual, w.iterations, dict(w.info))


def ess(w) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``; scale-invariant."""
    arr = w.weights if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
    s2 = float(arr @ arr)
    if s2 == 0.0:
        raise ValueError("effective sample size undefined for all-zero weights")
    return float(arr.sum()) ** 2 / s2


def collapse_weights(target_indices, w, n_obs: int | None = None) -> np.ndarray:
    """Per-observation sums of the weights of the tasks each observation anchors."""
    if hasattr(target_indices, "target_indices"):
        target_indices = target_indices.target_indices
    idx = np.asarray(target_indices, dtype=int)
    arr = w.weights if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
    if arr.shape[0] != idx.shape[0]:
        raise ValueError("weights are not aligned with tasks")
    n_obs = int(idx.max()) + 1 if n_obs is None else n_obs
    return np.bincount(idx, weights=arr, minlength=n_obs)


def weight_diagnostics(target_indices, w, n_obs: int) -> dict:
    """ESS, ESS/n and upper-tail weight on case-collapsed weights."""
    c = collapse_weights(target_indices, w, n_obs)
    e = ess(c)
    resid = w.max_margin_residual if isinstance(w, WeightVector) else float("nan")
    return {
        "ess": e,
        "ess_fraction": e / n_obs,
        "p95_relative_weight": float(np.quantile(c, 0.95) * n_obs / c.sum()),
        "max_margin_residual": resid,
    }


def calibration_weights(val_columns: dict, target_tasks: TargetTaskSet, variables: Sequence[str],
                        n_bins: int = 5, shrinkage: float = 0.0, merge_empty: bool = False,
                        tol: float = 1e-8, max_iter: int = 1000,
                        accept_unconverged: bool = False) -> tuple[WeightVector, WeightVector]:
    """Raw and shrunk raking weights for validation descriptor columns.

    ``val_columns`` maps each balancing variable (covariate label or ``"d"``)
    to its values over the validation tasks. With ``accept_unconverged`` an
    IPF run that stalls (infeasible margins) yields its final iterate, marked
    ``info["converged"] = False``, instead of raising.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bins = make_bins(target_tasks, variables, n_bins)
    margins = target_margins(target_tasks, bins)
    codes = bins.codes([val_columns[v] for v in bins.variables])
    try:
        raw = rake(codes, margins, tol=tol, max_iter=max_iter, merge_empty=merge_empty, bins=bins)
    except RakingError as exc:
        if not accept_unconverged or exc.last is None:
            raise
        raw = exc.last
    return raw, shrink(raw, shrinkage) if shrinkage > 0 else raw
