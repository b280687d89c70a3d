"""Gaussian random fields, the simulated world and the three sampling designs."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from .core import Dataset, Location, _as_coords, distance_matrix

DESIGNS = ("random", "clustered", "biased")

# x2/x4 field parameters and cluster dispersion are not fixed by the method;
# see README "Simulation settings".
PREDICTOR_RANGE = 0.2
CLUSTER_SD = 0.05
N_CLUSTERS = 10


@dataclass(frozen=True)
class CovarianceSpec:
    range: float
    sill: float = 1.0
    model: str = "exponential"

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError(f"covariance range must be > 0, got {self.range}")
        if not self.sill > 0:
            raise ValueError(f"sill must be > 0, got {self.sill}")
        if self.model != "exponential":
            raise ValueError("only the exponential covariance model is supported")


def exp_covariance(h, spec: CovarianceSpec):
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("distance must be non-negative")
    out = spec.sill * np.exp(-h / spec.range)
    return float(out) if out.ndim == 0 else out


class FactorizationError(RuntimeError):
    pass


def _cholesky_with_jitter(cov: np.ndarray, sill: float) -> np.ndarray:
    jitter = 1e-10 * sill
    while jitter <= 1e-6 * sill * (1 + 1e-9):
        try:
            return cholesky(cov + jitter * np.eye(cov.shape[0]), lower=True, check_finite=False)
        except LinAlgError:
            jitter *= 10
    raise FactorizationError("covariance matrix not positive definite after jitter escalation")


_FACTOR_CACHE: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
_FACTOR_CACHE_SIZE = 3


def _factor(coords: np.ndarray, spec: CovarianceSpec) -> np.ndarray:
    key = (coords.tobytes(), spec.range, spec.sill)
    if key in _FACTOR_CACHE:
        _FACTOR_CACHE.move_to_end(key)
        return _FACTOR_CACHE[key]
    cov = exp_covariance(distance_matrix(coords), spec)
    factor = _cholesky_with_jitter(cov, spec.sill)
    del cov
    _FACTOR_CACHE[key] = factor
    while len(_FACTOR_CACHE) > _FACTOR_CACHE_SIZE:
        _FACTOR_CACHE.popitem(last=False)
    return factor


def simulate_grf(locations, spec: CovarianceSpec, rng: np.random.Generator) -> np.ndarray:
    """One zero-mean draw at ``locations`` by dense Cholesky factorisation.

    Coincident locations share a single value. Factors are cached per
    (location set, covariance) so repeated draws on a grid are cheap.
    """
    coords = _as_coords(locations)
    if not np.all(np.isfinite(coords)):
        raise ValueError("non-finite location")
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    factor = _factor(uniq, spec)
    values = factor @ rng.standard_normal(uniq.shape[0])
    return values[inverse]


def residual_sd(s) -> float | np.ndarray:
    """Residual standard deviation; variance grows linearly from 0.4 (west) to 1.6 (east)."""
    sx = s.x if isinstance(s, Location) else np.asarray(s, dtype=float)
    return np.sqrt(0.4 + 1.2 * sx)


@dataclass(frozen=True)
class ScenarioConfig:
    beta0: float = 0.0
    beta1: float = 3.0
    beta2: float = 1.0
    rho: float = 0.1
    n: int = 200
    design: str = "random"
    grid_side: int = 60
    include_extra_predictors: bool = True
    bias_power: float = 1.0  # biased design keeps a point at s with probability (1 - s_x) ** bias_power

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; valid designs: {', '.join(DESIGNS)}")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError("n must be an integer >= 2")
        if int(self.grid_side) != self.grid_side or self.grid_side < 10:
            raise ValueError("grid_side must be an integer >= 10")
        if not self.bias_power > 0:
            raise ValueError("bias_power must be > 0")

    @property
    def covariate_names(self) -> tuple:
        return ("x1", "x2", "x3", "x4") if self.include_extra_predictors else ("x1", "x2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def grid_coords(side: int) -> np.ndarray:
    """Cell-centre nodes of a ``side x side`` grid on the unit square, x varying fastest."""
    c = (np.arange(side) + 0.5) / side
    gx, gy = np.meshgrid(c, c)
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True, eq=False)
class World:
    grid_side: int
    coords: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    x4: np.ndarray
    eps: np.ndarray
    z: np.ndarray

    @property
    def grid(self) -> list:
        return [Location(float(x), float(y)) for x, y in self.coords]

    def covariates(self, names=("x1", "x2", "x3", "x4")) -> np.ndarray:
        return np.column_stack([getattr(self, nm) for nm in names])

    def rows(self):
        for i in range(self.coords.shape[0]):
            yield (i, self.coords[i, 0], self.coords[i, 1], self.x1[i], self.x2[i],
                   self.x3[i], self.x4[i], self.eps[i], self.z[i])


WORLD_HEADER = ("node", "x", "y", "x1", "x2", "x3", "x4", "eps", "z")


def make_world(cfg: ScenarioConfig, rng: np.random.Generator) -> World:
    coords = grid_coords(cfg.grid_side)
    predictor = CovarianceSpec(PREDICTOR_RANGE, 1.0)
    x2 = simulate_grf(coords, predictor, rng)
    # x4 is always drawn so the residual stream does not depend on the flag
    x4 = simulate_grf(coords, predictor, rng)
    eps0 = simulate_grf(coords, CovarianceSpec(cfg.rho, 1.0), rng)
    x1 = coords[:, 0].copy()
    x3 = coords[:, 1].copy()
    eps = residual_sd(x1) * eps0
    z = cfg.beta0 + cfg.beta1 * x1 + cfg.beta2 * x2 + eps
    arrays = [x1, x2, x3, x4, eps, z]
    for a in arrays:
        a.setflags(write=False)
    return World(cfg.grid_side, coords, *arrays)


def _snap(points: np.ndarray, side: int) -> np.ndarray:
    ij = np.clip(np.floor(points * side).astype(int), 0, side - 1)
    return ij[:, 1] * side + ij[:, 0]


def _reflect(v: np.ndarray) -> np.ndarray:
    v = np.mod(v, 2.0)
    return np.where(v > 1.0, 2.0 - v, v)


def sample_nodes(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Grid node indices of a sample drawn under ``cfg.design``."""
    side = cfg.grid_side
    n = int(cfg.n)
    if n > side * side:
        raise ValueError(f"n={n} exceeds the {side * side} available grid nodes")
    taken: dict[int, None] = {}
    max_draws = 2000 * n

    if cfg.design == "clustered":
        parents = rng.uniform(size=(N_CLUSTERS, 2))
        sizes = np.full(N_CLUSTERS, n // N_CLUSTERS)
        sizes[: n % N_CLUSTERS] += 1
        draws = 0
        for parent, size in zip(parents, sizes):
            placed = 0
            while placed < size:
                pt = _reflect(parent + rng.normal(scale=CLUSTER_SD, size=2))
                node = int(_snap(pt[None, :], side)[0])
                draws += 1
                if draws > max_draws:
                    raise ValueError("could not place clustered sample on distinct grid nodes")
                if node not in taken:
                    taken[node] = None
                    placed += 1
        return np.fromiter(taken, dtype=int, count=n)

    draws = 0
    while len(taken) < n:
        pts = rng.uniform(size=(4 * n, 2))
        if cfg.design == "biased":
            keep = rng.uniform(size=pts.shape[0]) < (1.0 - pts[:, 0]) ** cfg.bias_power
            pts = pts[keep]
        for node in _snap(pts, side):
            if node not in taken:
                taken[int(node)] = None
                if len(taken) == n:
                    break
        draws += 4 * n
        if draws > max_draws:
            raise ValueError(f"could not draw {n} distinct grid nodes")
    return np.fromiter(taken, dtype=int, count=n)


def sample_from_world(world: World, nodes: np.ndarray, names=("x1", "x2", "x3", "x4")) -> Dataset:
    nodes = np.asarray(nodes, dtype=int)
    return Dataset(world.coords[nodes], world.covariates(names)[nodes], tuple(names), world.z[nodes])


def draw_sample(world: World, cfg: ScenarioConfig, rng: np.random.Generator) -> Dataset:
    if cfg.grid_side != world.grid_side:
        raise ValueError("scenario grid_side does not match the world")
    return sample_from_world(world, sample_nodes(cfg, rng), cfg.covariate_names)


def scenario_stream(master_seed: int, replicate: int) -> np.random.SeedSequence:
    """Per-replicate seed sequence, independent of execution order."""
    return np.random.SeedSequence([int(master_seed), int(replicate)])


__all__ = [
    "DESIGNS", "CovarianceSpec", "exp_covariance", "simulate_grf", "residual_sd",
    "ScenarioConfig", "World", "make_world", "draw_sample", "sample_nodes",
    "sample_from_world", "grid_coords", "scenario_stream",
]
