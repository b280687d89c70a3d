"""Shared data model: locations, datasets, task descriptors and distances.

Distances are planar Euclidean throughout. Ingested data must therefore be in
a projected coordinate reference system; this is documented, not enforced.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DISTANCE = "d"


class DataError(ValueError):
    """Raised for malformed input data (missing columns, non-finite values)."""


@dataclass(frozen=True)
class Location:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DataError(f"non-finite coordinate ({self.x}, {self.y})")


def _as_coords(points) -> np.ndarray:
    if isinstance(points, Location):
        return np.array([[points.x, points.y]], dtype=float)
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=float)
    else:
        points = list(points)
        if points and isinstance(points[0], Location):
            arr = np.array([[p.x, p.y] for p in points], dtype=float)
        else:
            arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, 2) if arr.size == 2 else arr.reshape(-1, 2)
    return arr


def pairwise_distance(a: Location, b: Location) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def distance_matrix(a, b=None) -> np.ndarray:
    """Euclidean distances between two point sets, shape ``(len(a), len(b))``."""
    a = _as_coords(a)
    b = a if b is None else _as_coords(b)
    dx = a[:, 0, None] - b[None, :, 0]
    dy = a[:, 1, None] - b[None, :, 1]
    return np.sqrt(dx * dx + dy * dy)


def nn_distances(targets, pool, chunk: int = 2048) -> np.ndarray:
    """Distance from every target to its nearest point in ``pool``."""
    targets = _as_coords(targets)
    pool = _as_coords(pool)
    if pool.shape[0] == 0:
        raise DataError("empty training pool")
    out = np.empty(targets.shape[0])
    for start in range(0, targets.shape[0], chunk):
        stop = start + chunk
        out[start:stop] = distance_matrix(targets[start:stop], pool).min(axis=1)
    return out


def nn_distance(target: Location, pool: Sequence[Location]) -> float:
    """Scalar reference version of :func:`nn_distances` for a single target."""
    pool = [p if isinstance(p, Location) else Location(*p) for p in pool]
    if not pool:
        raise DataError("empty training pool")
    return min(pairwise_distance(target, p) for p in pool)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Training sample: ``n`` locations, an ``n x p`` covariate matrix and a response."""

    coords: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    response: np.ndarray
    coord_names: tuple = ("x", "y")
    response_name: str = "z"

    def __post_init__(self):
        coords = _readonly(self.coords).reshape(-1, 2)
        response = _readonly(self.response).reshape(-1)
        n = coords.shape[0]
        covariates = _readonly(self.covariates).reshape(n, -1) if n else _readonly(self.covariates)
        names = tuple(self.covariate_names)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "response", response)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "coord_names", tuple(self.coord_names))
        if n < 2:
            raise DataError(f"dataset needs at least 2 observations, got {n}")
        if response.shape[0] != n or covariates.shape[0] != n:
            raise DataError("row counts of coordinates, covariates and response differ")
        if covariates.shape[1] != len(names):
            raise DataError(f"{covariates.shape[1]} covariate columns but {len(names)} names")
        if len(set(names)) != len(names):
            raise DataError(f"duplicate covariate names in {names}")
        if DISTANCE in names:
            raise DataError(f"covariate name {DISTANCE!r} is reserved for prediction distance")
        for label, arr in (("coordinates", coords), ("covariates", covariates), ("response", response)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {label}")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def locations(self) -> list:
        return [Location(float(x), float(y)) for x, y in self.coords]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise DataError(f"unknown covariate {name!r}; available: {list(self.covariate_names)}") from None

    def columns(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.empty((self.n, 0))
        return np.column_stack([self.column(nm) for nm in names])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.coords[idx], self.covariates[idx], self.covariate_names,
                       self.response[idx], self.coord_names, self.response_name)


@dataclass(frozen=True)
class TaskDescriptor:
    covariates: tuple
    d: float

    def __post_init__(self):
        if not self.d >= 0:
            raise DataError(f"prediction distance must be >= 0, got {self.d}")


@dataclass(frozen=True)
class ValidationTask:
    task_id: int
    target_index: int
    train_indices: np.ndarray = field(repr=False)
    descriptor: TaskDescriptor

    def __post_init__(self):
        if len(self.train_indices) == 0:
            raise DataError(f"task {self.task_id}: empty training set")
        if np.any(np.asarray(self.train_indices) == self.target_index):
            raise DataError(f"task {self.task_id}: target {self.target_index} is in its training set")


@dataclass(frozen=True, eq=False)
class TargetTaskSet:
    """Deployment tasks stored column-wise: covariates ``(|D|, p)`` and distances ``(|D|,)``."""

    covariates: np.ndarray
    covariate_names: tuple
    d: np.ndarray

    def __post_init__(self):
        cov = _readonly(self.covariates)
        d = _readonly(self.d).reshape(-1)
        if cov.ndim != 2 or cov.shape[0] != d.shape[0]:
            raise DataError("deployment covariates and distances are misaligned")
        if d.shape[0] < 1:
            raise DataError("target task set is empty")
        if cov.shape[1] != len(self.covariate_names):
            raise DataError("deployment covariate names do not match columns")
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    def __len__(self) -> int:
        return self.d.shape[0]

    @property
    def descriptors(self) -> list:
        return [TaskDescriptor(tuple(map(float, row)), float(dd)) for row, dd in zip(self.covariates, self.d)]

    def values(self, name: str) -> np.ndarray:
        if name == DISTANCE:
            return self.d
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise DataError(f"variable {name!r} absent from deployment descriptors") from None


def build_deployment_tasks(grid_locations, grid_covariates, training_locations,
                           covariate_names: Sequence[str] | None = None) -> TargetTaskSet:
    """Descriptors for every deployment location.

    Distances are measured to the full training sample, since the deployed
    model is trained on all data.
    """
    grid = _as_coords(grid_locations)
    cov = np.asarray(grid_covariates, dtype=float)
    if cov.ndim == 1:
        cov = cov.reshape(-1, 1)
    if cov.shape[0] != grid.shape[0]:
        raise DataError(f"{cov.shape[0]} covariate rows for {grid.shape[0]} grid locations")
    train = _as_coords(training_locations)
    if train.shape[0] == 0:
        raise DataError("empty training pool")
    if covariate_names is None:
        covariate_names = tuple(f"v{j + 1}" for j in range(cov.shape[1]))
    return TargetTaskSet(cov, tuple(covariate_names), nn_distances(grid, train))


# ---------------------------------------------------------------- delimited text

def format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return ""
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    return path


def read_columns(path, columns: Sequence[str]) -> np.ndarray:
    """Read named numeric columns from a comma-separated file with a header row.

    Raises :class:`DataError` naming missing columns, or listing the data rows
    (1-based, header excluded) that contain non-finite or unparsable values.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        pos = [header.index(c) for c in columns]
        values, bad = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                vals = [float(row[j]) for j in pos]
            except (ValueError, IndexError):
                bad.append(row_no)
                continue
            if not all(math.isfinite(v) for v in vals):
                bad.append(row_no)
                continue
            values.append(vals)
    if bad:
        shown = ", ".join(map(str, bad[:20])) + (" ..." if len(bad) > 20 else "")
        raise DataError(f"{path}: non-finite or missing values in data row(s) {shown}")
    return np.array(values, dtype=float).reshape(-1, len(columns))


def ingest_dataset(path, coord_columns: Sequence[str] = ("x", "y"), response_column: str = "z",
                   covariate_columns: Sequence[str] = ()) -> Dataset:
    coord_columns = tuple(coord_columns)
    if len(coord_columns) != 2:
        raise DataError("exactly two coordinate columns are required")
    covariate_columns = tuple(covariate_columns)
    table = read_columns(path, coord_columns + (response_column,) + covariate_columns)
    if table.shape[0] < 2:
        raise DataError(f"{path}: dataset needs at least 2 observations, got {table.shape[0]}")
    return Dataset(table[:, :2], table[:, 3:], covariate_columns, table[:, 2],
                   coord_columns, response_column)


def write_dataset(data: Dataset, path) -> Path:
    header = list(data.coord_names) + [data.response_name] + list(data.covariate_names)
    rows = (list(c) + [z] + list(x) for c, z, x in zip(data.coords, data.response, data.covariates))
    return write_table(path, header, rows)


def read_grid(path, coord_columns: Sequence[str] = ("x", "y"),
              covariate_columns: Sequence[str] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Deployment grid as ``(coords, covariates)``."""
    table = read_columns(path, tuple(coord_columns) + tuple(covariate_columns))
    if table.shape[0] < 1:
        raise DataError(f"{path}: grid file has no rows")
    return table[:, :2], table[:, 2:]
