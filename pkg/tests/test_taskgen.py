import itertools
import math

import numpy as np
import pytest

from conftest import make_dataset
from twcv import taskgen
from twcv.core import Dataset, distance_matrix
from twcv.simfield import ScenarioConfig, draw_sample, make_world


def _recomputed_d(data, task):
    D = distance_matrix(data.coords[[task.target_index]], data.coords[task.train_indices])
    return D.min()


def _scenario_sample(design, seed, side=40):
    rng = np.random.default_rng(seed)
    cfg = ScenarioConfig(design=design, grid_side=side)
    return draw_sample(make_world(cfg, rng), cfg, rng)


def test_loocv_two_points():
    data = Dataset([[0.0, 0.0], [3.0, 4.0]], np.zeros((2, 1)), ("x1",), [1.0, 2.0])
    ts = taskgen.gen_loocv(data)
    assert len(ts) == 2
    assert [t.descriptor.d for t in ts] == [5.0, 5.0]
    assert [list(t.train_indices) for t in ts] == [[1], [0]]


def test_loocv_n200():
    data = make_dataset(200)
    ts = taskgen.gen_loocv(data)
    assert len(ts) == 200
    assert all(len(t.train_indices) == 199 for t in ts)


def test_random_kfold_structure():
    data = make_dataset(200)
    ts = taskgen.gen_random_kfold(data, 10, rng=1)
    sizes = [len(g) for g in ts.train_groups()]
    assert sorted(sizes) == [20] * 10
    again = taskgen.gen_random_kfold(data, 10, rng=1)
    assert all(np.array_equal(a.train_indices, b.train_indices) for a, b in zip(ts, again))
    with pytest.raises(ValueError):
        taskgen.gen_random_kfold(data, 201)


def test_random_kfold_k_equals_n_is_loocv():
    data = make_dataset(25)
    a = taskgen.gen_random_kfold(data, 25, rng=3)
    b = taskgen.gen_loocv(data)
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.train_indices, tb.train_indices)
        assert ta.descriptor == tb.descriptor


def test_spatial_blocks_rejects_degenerate():
    data = make_dataset(30)
    with pytest.raises(ValueError):
        taskgen.gen_spatial_blocks(data, k=1, rng=0)
    dup = Dataset(np.repeat([[0.0, 0.0], [1.0, 1.0]], 5, axis=0), np.zeros((10, 1)), ("x1",), np.arange(10.0))
    with pytest.raises(ValueError, match="distinct"):
        taskgen.gen_spatial_blocks(dup, k=3, rng=0)


def test_spatial_blocks_two_clouds_match_brute_force():
    rng = np.random.default_rng(4)
    coords = np.vstack([rng.normal(0, 0.05, (6, 2)), rng.normal(0, 0.05, (6, 2)) + [2, 1]])
    # best 2-partition by exhaustive within-cluster sum of squares
    best, best_ss = None, np.inf
    for mask in itertools.product([0, 1], repeat=11):
        lab = np.array((0,) + mask)
        if lab.min() == lab.max():
            continue
        ss = sum(((coords[lab == g] - coords[lab == g].mean(0)) ** 2).sum() for g in (0, 1))
        if ss < best_ss:
            best, best_ss = lab, ss
    blocks = taskgen.spatial_blocks(coords, 2, seed=0)
    same = np.array_equal(blocks, best) or np.array_equal(blocks, 1 - best)
    assert same
    assert np.array_equal(best, np.repeat([0, 1], 6))


def test_lobo_d_shifted_right_of_loocv():
    shifts = []
    for s in range(5):
        data = _scenario_sample("random", s)
        lo = taskgen.gen_loocv(data).d
        lb = taskgen.gen_spatial_blocks(data, 10, rng=s).d
        shifts.append(np.median(lb) > np.median(lo))
    assert all(shifts)


def test_loocv_clustered_d_is_short():
    meds = {}
    for design in ("random", "clustered"):
        meds[design] = np.mean([np.median(taskgen.gen_loocv(_scenario_sample(design, s)).d) for s in range(5)])
    assert meds["clustered"] < meds["random"]


def test_buffered_basic_contract():
    data = _scenario_sample("clustered", 7)
    ts = taskgen.gen_buffered_loo(data, 500, 0.8, rng=7)
    assert len(ts) == 500
    assert min(len(t.train_indices) for t in ts) >= 160
    dist = distance_matrix(data.coords)
    for t in ts:
        # d is the nearest retained distance, strictly beyond every excluded point
        excluded = np.setdiff1d(np.arange(data.n), np.append(t.train_indices, t.target_index))
        if excluded.size:
            assert t.descriptor.d > dist[t.target_index, excluded].max()
        assert t.descriptor.d == _recomputed_d(data, t)
    counts = np.bincount(ts.target_indices, minlength=data.n)
    assert counts.min() >= 2 and counts.max() <= 3


def test_buffered_limit_is_loocv():
    data = make_dataset(40, seed=8)
    n = data.n
    ts = taskgen.gen_buffered_loo(data, 100, 1 - 1 / n, rng=2)
    loo = taskgen.gen_loocv(data).d
    for t in ts:
        assert len(t.train_indices) == n - 1
        assert t.descriptor.d == loo[t.target_index]


def test_buffered_wider_d_range_than_loocv_on_clustered():
    for s in range(5):
        data = _scenario_sample("clustered", 10 + s)
        lo = taskgen.gen_loocv(data).d
        bu = taskgen.gen_buffered_loo(data, 500, 0.8, rng=s).d
        assert bu.min() >= lo.min() - 1e-12
        assert bu.max() > lo.max()
        assert np.quantile(bu, 0.9) > np.quantile(lo, 0.9)


@pytest.mark.parametrize("label", taskgen.GENERATORS)
def test_generators_deterministic_and_consistent(label):
    data = make_dataset(60, seed=9)
    a = taskgen.generate(label, data, rng=11, n_tasks=120)
    b = taskgen.generate(label, data, rng=11, n_tasks=120)
    assert len(a) == len(b)
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.train_indices, tb.train_indices)
        assert ta.descriptor == tb.descriptor
        assert ta.descriptor.d == _recomputed_d(data, ta)
    assert len({t.task_id for t in a}) == len(a)


def test_buffered_target_radii_contract():
    data = _scenario_sample("clustered", 21)
    rng = np.random.default_rng(0)
    target_d = rng.uniform(0, 0.15, size=3000)
    ts = taskgen.gen_buffered_loo(data, 500, 0.8, rng=3, target_d=target_d)
    assert ts.generator_params["radii"] == "target"
    dist = distance_matrix(data.coords)
    for t in ts:
        assert len(t.train_indices) >= 160
        excluded = np.setdiff1d(np.arange(data.n), np.append(t.train_indices, t.target_index))
        if excluded.size:
            assert t.descriptor.d > dist[t.target_index, excluded].max()
        assert t.descriptor.d == _recomputed_d(data, t)
    # the task distances follow the requested law far more closely than uniform radii do
    uni = taskgen.gen_buffered_loo(data, 500, 0.8, rng=3).d
    qs = [0.25, 0.5, 0.75]
    err_t = np.abs(np.quantile(ts.d, qs) - np.quantile(target_d, qs)).max()
    err_u = np.abs(np.quantile(uni, qs) - np.quantile(target_d, qs)).max()
    assert err_t < err_u
    assert err_t < 0.02


def test_buffered_target_radii_ties_keep_neighbours():
    # four neighbours at exactly one distance: a target at that distance keeps all of them
    coords = np.array([[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1]] + [[5 + i, 5] for i in range(15)], float)
    data = Dataset(coords, np.zeros((20, 0)), (), np.zeros(20))
    ts = taskgen.gen_buffered_loo(data, 40, 0.5, rng=1, target_d=np.array([1.0]))
    for t in ts:
        if t.target_index == 0:
            assert t.descriptor.d == 1.0
            assert {1, 2, 3, 4} <= set(t.train_indices.tolist())


def test_buffered_target_radii_rejects_bad_targets():
    data = make_dataset(30)
    for bad in (np.array([]), np.array([np.nan]), np.array([-1.0])):
        with pytest.raises(ValueError):
            taskgen.gen_buffered_loo(data, 10, target_d=bad)


def test_buffered_rejects_tiny_or_bad_params():
    with pytest.raises(ValueError):
        taskgen.gen_buffered_loo(make_dataset(4), 10)
    with pytest.raises(ValueError):
        taskgen.gen_buffered_loo(make_dataset(20), 10, min_train_frac=1.0)
    with pytest.raises(ValueError, match="unknown generator"):
        taskgen.generate("nndm", make_dataset(20))


def test_task_rows_layout():
    data = make_dataset(10)
    rows = list(taskgen.task_rows(taskgen.gen_loocv(data)))
    assert len(rows) == 10
    assert len(rows[0]) == len(taskgen.TASKS_HEADER) + data.p
    assert rows[3][:3] == (3, 3, 9)
    assert math.isclose(rows[3][3], taskgen.gen_loocv(data).d[3])
