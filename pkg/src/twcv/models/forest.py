"""Bagged CART regression forest.

Tree growth is compiled with numba; randomness (bootstrap draws and the
per-node candidate variables) is generated up front with numpy so that a
forest is a pure function of its data and seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np


@numba.njit(cache=True)
def _grow_tree(X, y, w, sorted_idx, n_cases, keys, mtry, min_node_size,
               feature, threshold, left, right, value, go_left, buf):
    # sorted_idx[j, lo:hi] lists the node's distinct in-bag cases ordered by
    # X[:, j]; w holds bootstrap multiplicities. Every feature's list is
    # stably partitioned after each split.
    p = sorted_idx.shape[0]
    max_nodes = feature.shape[0]
    perm = np.empty(p, np.int64)
    start = np.empty(max_nodes, np.int64)
    end = np.empty(max_nodes, np.int64)
    stack = np.empty(max_nodes, np.int64)
    start[0] = 0
    end[0] = n_cases
    n_nodes = 1
    top = 0
    stack[0] = 0
    while top >= 0:
        node = stack[top]
        top -= 1
        lo = start[node]
        hi = end[node]
        total = 0.0
        m = 0.0
        for i in range(lo, hi):
            s = sorted_idx[0, i]
            total += w[s] * y[s]
            m += w[s]
        value[node] = total / m
        feature[node] = -1
        left[node] = -1
        right[node] = -1
        if m <= min_node_size or hi - lo < 2:
            continue
        parent_score = total * total / m
        # partial Fisher-Yates draw of mtry variables, then ascending order
        for k in range(p):
            perm[k] = k
        if mtry < p:
            for k in range(mtry):
                r = k + int(keys[node, k] * (p - k))
                if r >= p:
                    r = p - 1
                tmp = perm[k]
                perm[k] = perm[r]
                perm[r] = tmp
            for k in range(1, mtry):
                v = perm[k]
                q = k - 1
                while q >= 0 and perm[q] > v:
                    perm[q + 1] = perm[q]
                    q -= 1
                perm[q + 1] = v
        best_score = parent_score
        best_var = -1
        best_thr = 0.0
        for c in range(min(mtry, p)):
            j = perm[c]
            sl = 0.0
            nl = 0.0
            b = X[sorted_idx[j, lo], j]
            for i in range(lo, hi - 1):
                s = sorted_idx[j, i]
                sl += w[s] * y[s]
                nl += w[s]
                a = b
                b = X[sorted_idx[j, i + 1], j]
                sr = total - sl
                score = sl * sl / nl + sr * sr / (m - nl)
                if score > best_score and a < b:
                    best_score = score
                    best_var = j
                    best_thr = 0.5 * (a + b)
        if best_var < 0 or best_score - parent_score <= 1e-12 * max(1.0, abs(parent_score)):
            continue
        for i in range(lo, hi):
            s = sorted_idx[0, i]
            go_left[s] = X[s, best_var] <= best_thr
        n_left = 0
        for j in range(p):
            nl_ = 0
            nr_ = 0
            for i in range(lo, hi):
                s = sorted_idx[j, i]
                g = go_left[s]
                sorted_idx[j, lo + nl_] = s
                buf[nr_] = s
                nl_ += g
                nr_ += 1 - g
            for i in range(nr_):
                sorted_idx[j, lo + nl_ + i] = buf[i]
            n_left = nl_
        feature[node] = best_var
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        start[lc] = lo
        end[lc] = lo + n_left
        start[rc] = lo + n_left
        end[rc] = hi
        top += 1
        stack[top] = rc
        top += 1
        stack[top] = lc
    return n_nodes


@numba.njit(cache=True)
def _grow_forest(X, y, order, counts, keys, mtry, min_node_size,
                 feature, threshold, left, right, value):
    # order[j] sorts the data by feature j; counts[t] are bootstrap multiplicities
    n, p = X.shape
    go_left = np.zeros(n, np.int64)
    buf = np.empty(n, np.int64)
    sorted_idx = np.empty((p, n), np.int64)
    w = np.empty(n)
    for t in range(counts.shape[0]):
        for s in range(n):
            w[s] = counts[t, s]
        k = 0
        for j in range(p):
            k = 0
            for r in range(n):
                s = order[j, r]
                if counts[t, s] > 0:
                    sorted_idx[j, k] = s
                    k += 1
        _grow_tree(X, y, w, sorted_idx, k, keys[t], mtry, min_node_size,
                   feature[t], threshold[t], left[t], right[t], value[t], go_left, buf)


@numba.njit(cache=True)
def _predict_trees(X, feature, threshold, left, right, value):
    n_trees = feature.shape[0]
    out = np.empty((n_trees, X.shape[0]))
    for t in range(n_trees):
        for i in range(X.shape[0]):
            node = 0
            while feature[t, node] >= 0:
                if X[i, feature[t, node]] <= threshold[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            out[t, i] = value[t, node]
    return out


@dataclass(frozen=True, eq=False)
class ForestModel:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    inbag: np.ndarray  # (n_trees, n) bootstrap multiplicities
    n_trees: int
    mtry: int
    min_node_size: int
    X: np.ndarray
    y: np.ndarray

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def tree_predictions(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.asarray(X, dtype=float).reshape(-1, self.p))
        return _predict_trees(X, self.feature, self.threshold, self.left, self.right, self.value)

    def predict(self, X) -> np.ndarray:
        return self.tree_predictions(X).mean(axis=0)


def default_mtry(p: int) -> int:
    return max(1, int(math.floor(p / 3)))


def fit_rf(X, y, n_trees: int = 500, mtry: int | None = None, min_node_size: int = 5,
           rng: np.random.Generator | int | None = None) -> ForestModel:
    """Grow ``n_trees`` bootstrap CART trees.

    Splits maximise variance reduction over ``mtry`` randomly chosen
    variables, with thresholds at midpoints between sorted distinct values.
    Ties go to the lowest variable index, then the lowest threshold. A node is
    split only while it holds more than ``min_node_size`` cases.
    """
    y = np.ascontiguousarray(np.asarray(y, dtype=float).reshape(-1))
    X = np.ascontiguousarray(np.asarray(X, dtype=float).reshape(y.shape[0], -1))
    n, p = X.shape
    if n < min_node_size or n < 1:
        raise ValueError(f"need at least min_node_size={min_node_size} observations, got {n}")
    if p < 1:
        raise ValueError("random forest needs at least one predictor")
    mtry = default_mtry(p) if mtry is None else int(mtry)
    if not 1 <= mtry <= p:
        raise ValueError(f"mtry must lie in [1, {p}]")
    rng = np.random.default_rng(rng)
    boot = rng.integers(0, n, size=(n_trees, n))
    max_nodes = 2 * n + 1
    keys = rng.random((n_trees, max_nodes, p)) if mtry < p else np.zeros((n_trees, 1, p))
    feature = np.full((n_trees, max_nodes), -1, dtype=np.int64)
    threshold = np.zeros((n_trees, max_nodes))
    left = np.full((n_trees, max_nodes), -1, dtype=np.int64)
    right = np.full((n_trees, max_nodes), -1, dtype=np.int64)
    value = np.zeros((n_trees, max_nodes))
    inbag = np.zeros((n_trees, n), dtype=np.int64)
    np.add.at(inbag, (np.repeat(np.arange(n_trees), n), boot.ravel()), 1)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    _grow_forest(X, y, order, inbag, keys, mtry, min_node_size,
                 feature, threshold, left, right, value)
    return ForestModel(feature, threshold, left, right, value, inbag, n_trees, mtry,
                       min_node_size, X, y)


def rf_predict(model: ForestModel, covariates) -> np.ndarray | float:
    X = np.asarray(covariates, dtype=float)
    out = model.predict(X)
    return float(out[0]) if X.ndim == 1 else out


def rf_oob_predictions(model: ForestModel) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-bag predictions and the number of trees each case was out of bag for."""
    per_tree = model.tree_predictions(model.X)
    oob = model.inbag == 0
    counts = oob.sum(axis=0)
    sums = np.where(oob, per_tree, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        pred = sums / counts
    return pred, counts


def rf_oob_mse(model: ForestModel) -> tuple[float, int]:
    """OOB mean squared error and the number of cases skipped (never out of bag)."""
    pred, counts = rf_oob_predictions(model)
    ok = counts > 0
    if not np.any(ok):
        raise ValueError("every case is in-bag for every tree; OOB error undefined")
    err = model.y[ok] - pred[ok]
    return float(np.mean(err * err)), int((~ok).sum())
