"""Validation task generators: LOOCV, random k-fold, spatial blocks, buffered LOO."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from .core import DISTANCE, Dataset, DataError, TaskDescriptor, ValidationTask, distance_matrix

GENERATORS = ("loocv", "random_cv", "lobo_cv", "buffered")


@dataclass(frozen=True, eq=False)
class TaskSet:
    tasks: list
    generator_label: str
    generator_params: dict = field(default_factory=dict)
    covariate_names: tuple = ()

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids are not unique")

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def target_indices(self) -> np.ndarray:
        return np.array([t.target_index for t in self.tasks], dtype=int)

    @property
    def d(self) -> np.ndarray:
        return np.array([t.descriptor.d for t in self.tasks])

    def values(self, name: str) -> np.ndarray:
        """Descriptor column ``name`` (a covariate label or ``"d"``) over tasks."""
        if name == DISTANCE:
            return self.d
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise DataError(f"variable {name!r} absent from validation descriptors") from None
        return np.array([t.descriptor.covariates[j] for t in self.tasks])

    def train_groups(self) -> list:
        """Tasks grouped by identical training set, in order of first appearance."""
        groups: dict[bytes, list] = {}
        for pos, t in enumerate(self.tasks):
            groups.setdefault(np.asarray(t.train_indices).tobytes(), []).append(pos)
        return list(groups.values())


def _make_task(data: Dataset, dist: np.ndarray, task_id: int, target: int, train: np.ndarray) -> ValidationTask:
    train = np.asarray(train, dtype=int)
    train.setflags(write=False)
    d = float(dist[target, train].min())
    desc = TaskDescriptor(tuple(float(v) for v in data.covariates[target]), d)
    return ValidationTask(task_id, int(target), train, desc)


def _fold_tasks(data: Dataset, folds: np.ndarray, label: str, params: dict) -> TaskSet:
    dist = distance_matrix(data.coords)
    idx = np.arange(data.n)
    train_for = {f: idx[folds != f] for f in np.unique(folds)}
    tasks = [_make_task(data, dist, i, i, train_for[folds[i]]) for i in range(data.n)]
    return TaskSet(tasks, label, params, data.covariate_names)


def gen_loocv(data: Dataset) -> TaskSet:
    return _fold_tasks(data, np.arange(data.n), "loocv", {})


def gen_random_kfold(data: Dataset, k: int = 10, rng=None) -> TaskSet:
    """Random partition into ``k`` folds whose sizes differ by at most one."""
    if k > data.n:
        raise ValueError(f"k={k} exceeds the number of observations ({data.n})")
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(rng)
    folds = np.empty(data.n, dtype=int)
    folds[rng.permutation(data.n)] = np.arange(data.n) % k
    return _fold_tasks(data, folds, "random_cv", {"k": k})


def spatial_blocks(coords: np.ndarray, k: int, seed: int) -> np.ndarray:
    """k-means block labels of the coordinates (Lloyd, 10 restarts)."""
    n_distinct = np.unique(coords, axis=0).shape[0]
    if k < 2:
        raise ValueError("k must be at least 2: a single block leaves no training data")
    if n_distinct < k:
        raise ValueError(f"only {n_distinct} distinct locations for k={k} blocks")
    km = KMeans(n_clusters=k, n_init=10, algorithm="lloyd", random_state=seed)
    return km.fit_predict(coords)


def gen_spatial_blocks(data: Dataset, k: int = 10, rng=None) -> TaskSet:
    rng = np.random.default_rng(rng)
    seed = int(rng.integers(0, 2**31 - 1))
    blocks = spatial_blocks(data.coords, k, seed)
    return _fold_tasks(data, blocks, "lobo_cv", {"k": k})


def min_train_size(n: int, min_train_frac: float) -> int:
    return int(math.ceil(min_train_frac * n - 1e-9))


def gen_buffered_loo(data: Dataset, n_tasks: int = 500, min_train_frac: float = 0.8,
                     rng=None, target_d=None) -> TaskSet:
    """Leave-one-out with a random buffer around each target.

    Targets are drawn uniformly by cycling through fresh random permutations
    of the observations, so every observation anchors either
    ``floor(n_tasks / n)`` or ``ceil(n_tasks / n)`` tasks. ``r_max`` is the
    largest radius that keeps at least ``ceil(min_train_frac * n)`` training
    cases. By default the buffer radius is ``Uniform(0, r_max)``. Given
    ``target_d`` (deployment prediction distances), each task instead draws a
    deployment distance and buffers so that its own prediction distance is
    the admissible neighbour distance closest to the draw, so task distances
    approximate the deployment distribution where the sample allows it.
    """
    n = data.n
    if n < 5:
        raise ValueError("buffered LOO needs at least 5 observations")
    if not 0 < min_train_frac < 1:
        raise ValueError("min_train_frac must lie in (0, 1)")
    m = min_train_size(n, min_train_frac)
    if m > n - 1:
        raise ValueError(f"min_train_frac={min_train_frac} leaves no room for a held-out target")
    rng = np.random.default_rng(rng)
    dist = distance_matrix(data.coords)
    # r_max: (n - m)-th smallest distance to the other observations
    others = np.sort(dist + np.diag(np.full(n, np.inf)), axis=1)
    r_max = others[:, n - m - 1]
    n_perm = -(-n_tasks // n)
    targets = np.concatenate([rng.permutation(n) for _ in range(n_perm)])[:n_tasks]
    if target_d is None:
        radii = rng.uniform(size=n_tasks) * r_max[targets]
    else:
        target_d = np.asarray(target_d, dtype=float).reshape(-1)
        if target_d.size == 0 or not np.all(np.isfinite(target_d)) or target_d.min() < 0:
            raise ValueError("target distances must be a non-empty set of finite values >= 0")
        # Excluding the k nearest neighbours makes the (k+1)-th the prediction
        # distance; pick the admissible k whose distance is closest to a draw
        # from the deployment distances; the buffer is the farthest excluded distance.
        draws = rng.choice(target_d, size=n_tasks)
        radii = np.empty(n_tasks)
        for j, (t, dstar) in enumerate(zip(targets, draws)):
            cand = others[t, : n - m]
            k = int(np.argmin(np.abs(cand - dstar)))
            while k > 0 and cand[k - 1] == cand[k]:
                k -= 1  # ties: keep every neighbour at the chosen distance
            radii[j] = 0.0 if k == 0 else cand[k - 1]
    idx = np.arange(n)
    tasks = []
    for tid, (target, u) in enumerate(zip(targets, radii)):
        keep = (dist[target] > u) & (idx != target)
        if r_max[target] == 0.0:
            keep = idx != target
        tasks.append(_make_task(data, dist, tid, int(target), idx[keep]))
    params = {"n_tasks": n_tasks, "min_train_frac": min_train_frac,
              "radii": "uniform" if target_d is None else "target"}
    return TaskSet(tasks, "buffered", params, data.covariate_names)


def generate(label: str, data: Dataset, rng=None, k: int = 10, n_tasks: int = 500,
             min_train_frac: float = 0.8, target_d=None) -> TaskSet:
    """Dispatch by generator label; ``target_d`` only affects the buffered generator."""
    if label == "loocv":
        return gen_loocv(data)
    if label == "random_cv":
        return gen_random_kfold(data, k, rng)
    if label == "lobo_cv":
        return gen_spatial_blocks(data, k, rng)
    if label == "buffered":
        return gen_buffered_loo(data, n_tasks, min_train_frac, rng, target_d)
    raise ValueError(f"unknown generator {label!r}; valid: {', '.join(GENERATORS)}")


TASKS_HEADER = ("task_id", "target_index", "train_size", "d")


def task_rows(tasks: TaskSet):
    for t in tasks:
        yield (t.task_id, t.target_index, len(t.train_indices), t.descriptor.d) + tuple(t.descriptor.covariates)
