import csv
import json
import math

import numpy as np
import pytest
import yaml

from conftest import make_dataset
from twcv.cli import main
from twcv.config import RunConfig, load_config
from twcv.core import write_dataset, write_table


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_config_round_trip(tmp_path):
    cfg = RunConfig.from_dict({"master_seed": 7, "scenario": {"design": "biased", "grid_side": 30},
                               "experiment": {"replicates": 3, "suite": ["loocv", "twcv"]},
                               "evaluate": {"balancing_variables": ["x1"], "settings": {"n_tasks": 50}}})
    again = RunConfig.from_yaml(cfg.to_yaml())
    assert again == cfg
    assert again.to_dict() == cfg.to_dict()
    assert again.digest() == cfg.digest()
    assert RunConfig.from_yaml(RunConfig().to_yaml()) == RunConfig()
    p = tmp_path / "c.yaml"
    p.write_text(cfg.to_yaml())
    assert load_config(p) == cfg


@pytest.mark.parametrize("doc", [
    {"seeed": 1},
    {"scenario": {"desing": "random"}},
    {"experiment": {"replicate": 2}},
    {"evaluate": {"settings": {"lambda": 0.2}}},
])
def test_config_unknown_keys_rejected(doc):
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict(doc)


def _cfg_file(tmp_path, doc):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def test_simulate_shapes_and_determinism(tmp_path):
    args = ["simulate", "--replicates", "1", "--seed", "5"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    for name in ("world.csv", "sample.csv"):
        a = (tmp_path / "a" / "replicate_0000" / name).read_bytes()
        b = (tmp_path / "b" / "replicate_0000" / name).read_bytes()
        assert a == b
    assert len(_read(tmp_path / "a" / "replicate_0000" / "world.csv")) == 3600
    assert len(_read(tmp_path / "a" / "replicate_0000" / "sample.csv")) == 200
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["master_seed"] == 5 and len(man["config_hash"]) == 64
    first = (tmp_path / "a" / "manifest.json").read_bytes()
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "manifest.json").read_bytes() == first


def test_invalid_design_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--design", "stratified"])
    assert info.value.code == 2
    err = capsys.readouterr().err
    assert "random" in err and "clustered" in err and "biased" in err


def test_invalid_config_design_lists_valid(tmp_path, capsys):
    cfg = _cfg_file(tmp_path, {"scenario": {"design": "stratified"}})
    with pytest.raises(SystemExit):
        main(["simulate", "--config", cfg])
    assert "valid designs: random, clustered, biased" in capsys.readouterr().err


def _write_inputs(tmp_path, n=80, seed=0):
    data = make_dataset(n, p=2, seed=seed)
    write_dataset(data, tmp_path / "data.csv")
    rng = np.random.default_rng(seed + 1)
    g = rng.random((400, 2))
    write_table(tmp_path / "grid.csv", ("x", "y", "x1", "x2"),
                np.column_stack([g, rng.normal(size=(400, 2))]))
    return data


def test_tasks_and_weights_commands(tmp_path):
    _write_inputs(tmp_path)
    cfg = _cfg_file(tmp_path, {"evaluate": {"settings": {"n_tasks": 120, "merge_empty_bins": True,
                                                         "accept_unconverged": True}}})
    out = tmp_path / "t"
    assert main(["tasks", str(tmp_path / "data.csv"), "--config", cfg, "--out-dir", str(out)]) == 0
    rows = _read(out / "tasks.csv")
    assert len(rows) == 120
    assert list(rows[0]) == ["task_id", "target_index", "train_size", "d", "x1", "x2"]
    assert min(int(r["train_size"]) for r in rows) >= 64
    out = tmp_path / "w"
    assert main(["weights", str(tmp_path / "data.csv"), str(tmp_path / "grid.csv"), "--config", cfg,
                 "--estimator", "dwcv", "--out-dir", str(out)]) == 0
    w = _read(out / "weights.csv")
    assert len(w) == 120
    assert sum(float(r["shrunk_weight"]) for r in w) == pytest.approx(1.0)
    diag = _read(out / "diagnostics.csv")[0]
    assert 0 < float(diag["ess_fraction"]) <= 1


def test_evaluate_missing_balancing_column(tmp_path, capsys):
    _write_inputs(tmp_path)
    rows = _read(tmp_path / "grid.csv")
    write_table(tmp_path / "grid2.csv", ("x", "y", "x1"), [(r["x"], r["y"], r["x1"]) for r in rows])
    code = main(["evaluate", str(tmp_path / "data.csv"), str(tmp_path / "grid2.csv"),
                 "--out-dir", str(tmp_path / "o")])
    assert code == 2
    assert "x2" in capsys.readouterr().err


def test_evaluate_coverage_error_is_reported(tmp_path, capsys):
    _write_inputs(tmp_path)
    # a target grid far outside the sample: its distances are never reached by the tasks
    rows = _read(tmp_path / "grid.csv")
    write_table(tmp_path / "far.csv", ("x", "y", "x1", "x2"),
                [(float(r["x"]) + 50, float(r["y"]), r["x1"], r["x2"]) for r in rows])
    cfg = _cfg_file(tmp_path, {"evaluate": {"suite": ["twcv"], "models": ["rk"],
                                            "settings": {"n_tasks": 100}}})
    code = main(["evaluate", str(tmp_path / "data.csv"), str(tmp_path / "far.csv"), "--config", cfg,
                 "--out-dir", str(tmp_path / "o")])
    assert code == 0
    err = capsys.readouterr().err
    assert "insufficient task coverage" in err
    est = _read(tmp_path / "o" / "estimates.csv")
    assert est[0]["rmse_estimate"] == "" and "empty bins" in est[0]["note"]


def test_evaluate_own_grid_twcv_close_to_random_cv(tmp_path):
    # no covariate shift: deployment tasks are the sample itself, balancing x1 only
    data = _write_inputs(tmp_path, n=150, seed=3)
    write_table(tmp_path / "self.csv", ("x", "y", "x1", "x2"),
                np.column_stack([data.coords, data.covariates]))
    cfg = _cfg_file(tmp_path, {"evaluate": {
        "suite": ["random_cv", "buffered_cv", "twcv"], "models": ["rk"],
        "settings": {"n_tasks": 300, "base_variables": ["x1"]},
        "balancing_variables": ["x1"]}})
    out = tmp_path / "o"
    assert main(["evaluate", str(tmp_path / "data.csv"), str(tmp_path / "self.csv"), "--config", cfg,
                 "--out-dir", str(out)]) == 0
    est = {r["estimator"]: float(r["rmse_estimate"]) for r in _read(out / "estimates.csv")}
    assert est["twcv"] == pytest.approx(est["random_cv"], rel=0.15)
    assert len(_read(out / "weights.csv")) == 150 + 2 * 300


def _exp_cfg(tmp_path):
    return _cfg_file(tmp_path, {
        "master_seed": 3,
        "scenario": {"grid_side": 30, "n": 100},
        "experiment": {"replicates": 2, "suite": ["loocv", "twcv"], "models": ["rf"], "n_trees": 20,
                       "settings": {"n_tasks": 100, "merge_empty_bins": True, "accept_unconverged": True}}})


def test_experiment_rows_and_worker_independence(tmp_path):
    cfg = _exp_cfg(tmp_path)
    assert main(["experiment", "--config", cfg, "--out-dir", str(tmp_path / "w1"), "--workers", "1"]) == 0
    assert main(["experiment", "--config", cfg, "--out-dir", str(tmp_path / "w2"), "--workers", "2"]) == 0
    rows = _read(tmp_path / "w1" / "results.csv")
    assert len(rows) == 4
    assert {r["estimator"] for r in rows} == {"loocv", "twcv"}
    for name in ("results.csv", "summary.csv", "diagnostics.csv"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w2" / name).read_bytes()
    for r in rows:
        assert math.isclose(float(r["error"]), float(r["rmse_estimate"]) - float(r["deployment_rmse"]))


def test_workers_env_default(tmp_path, monkeypatch):
    from twcv.cli import _parser, resolve_config
    monkeypatch.setenv("TWCV_WORKERS", "3")
    assert resolve_config(_parser().parse_args(["experiment"])).workers == 3
    assert resolve_config(_parser().parse_args(["experiment", "--workers", "2"])).workers == 2


def test_missing_dataset_file(tmp_path, capsys):
    assert main(["tasks", str(tmp_path / "nope.csv")]) == 2
    assert "nope.csv" in capsys.readouterr().err


def _urban_inputs(tmp_path):
    """503 stations drawn towards six towns on a projected 50 x 50 grid; noise is strongest in town."""
    from twcv.simfield import CovarianceSpec, simulate_grf

    rng = np.random.default_rng(5)
    c = (np.arange(50) + 0.5) / 50
    grid = np.column_stack([g.ravel() for g in np.meshgrid(c, c)])
    towns = rng.random((6, 2))
    urban = np.exp(-np.linalg.norm(grid[:, None] - towns[None], axis=2).min(axis=1) / 0.08)
    elev = simulate_grf(grid, CovarianceSpec(0.3), rng)
    eps = simulate_grf(grid, CovarianceSpec(0.05), rng) * (0.2 + 1.5 * urban)
    z = 2 * urban + elev + eps
    idx = rng.choice(grid.shape[0], 503, replace=False, p=urban**2 / (urban**2).sum())
    xy = grid * 1e5
    write_table(tmp_path / "grid.csv", ("x", "y", "urban", "elev"), zip(xy[:, 0], xy[:, 1], urban, elev))
    write_table(tmp_path / "stations.csv", ("x", "y", "z", "urban", "elev"),
                zip(xy[idx, 0], xy[idx, 1], z[idx], urban[idx], elev[idx]))
    return tmp_path / "stations.csv", tmp_path / "grid.csv"


@pytest.mark.slow
def test_evaluate_urban_biased_network(tmp_path):
    data, grid = _urban_inputs(tmp_path)
    cfg = _cfg_file(tmp_path, {"evaluate": {
        "suite": ["lobo_cv", "buffered_cv", "twcv"], "models": ["rk"],
        "settings": {"n_tasks": 10000, "merge_empty_bins": True, "accept_unconverged": True}}})
    out = tmp_path / "out"
    assert main(["evaluate", str(data), str(grid), "--config", str(cfg), "--out-dir", str(out)]) == 0
    est = {r["estimator"]: float(r["rmse_estimate"]) for r in _read(out / "estimates.csv")}
    assert est["twcv"] < est["lobo_cv"]
    assert len(_read(out / "weights.csv")) == 503 + 2 * 10000
