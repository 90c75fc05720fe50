import csv
import json

import numpy as np
import pytest

from gpclab import cli
from gpclab.config import ExperimentConfig, default_catalogue, load_config, save_config
from gpclab.environment import Environment
from gpclab.errors import CatalogueSizeMismatch
from gpclab.harness import (compare, experiment_environments, export_plots, generate_environments,
                            histogram_buckets, load_runs, split_environments, write_report)
from gpclab.mpc import run_mpc_episode
from gpclab.trajectories import CurveSpec, ObstacleState

CAT = default_catalogue()


def small_config_dict():
    return {
        "catalogue": [CAT[0].to_dict(), CAT[4].to_dict()],
        "nTrain": 1, "nTest": 1, "seed": 5,
        "sim": {"duration": 1.0},
        "gp": {"nMax": 100, "fitLengthScales": False, "explorationEpisodes": 1},
    }


def test_ninety_environments():
    envs = generate_environments(CAT)
    assert len(envs) == 90
    pairs = {(e.robot_curve, e.obstacle_curve) for e in envs}
    assert len(pairs) == 90
    assert all(e.robot_curve != e.obstacle_curve for e in envs)


def test_two_curve_catalogue():
    envs = generate_environments(CAT[:2])
    assert [(e.robot_curve, e.obstacle_curve) for e in envs] == [(CAT[0], CAT[1]), (CAT[1], CAT[0])]


def test_catalogue_size_checked():
    with pytest.raises(CatalogueSizeMismatch):
        generate_environments(CAT[:7])
    with pytest.raises(ValueError):
        generate_environments([CAT[0], CAT[0]])
    with pytest.raises(ValueError):
        Environment("x", CAT[0], CAT[0])


def test_split_disjoint_and_reproducible():
    envs = generate_environments(CAT)
    tr, te = split_environments(envs, 6, 4, seed=11)
    assert len(tr) == 6 and len(te) == 4
    assert not {e.id for e in tr} & {e.id for e in te}
    tr2, te2 = split_environments(envs, 6, 4, seed=11)
    assert [e.id for e in tr] == [e.id for e in tr2] and [e.id for e in te] == [e.id for e in te2]
    assert [e.id for e in split_environments(envs, 6, 4, seed=12)[0]] != [e.id for e in tr]
    with pytest.raises(ValueError):
        split_environments(envs[:5], 3, 3, 0)
    a, b = experiment_environments(ExperimentConfig())
    assert (len(a), len(b)) == (6, 4)


def test_histogram_buckets():
    assert histogram_buckets([31, 35, 44], 10) == {"30-40": 2, "40-50": 1}
    assert histogram_buckets([], 1.0) == {}


def test_environment_round_trip_and_initial_state():
    for env in (Environment("a", CAT[1], CAT[2]),
                Environment("b", CAT[3], ObstacleState([1.0, 2.0], [0.1, -0.2]), 0.4, 7.0)):
        back = Environment.from_dict(json.loads(json.dumps(env.to_dict())))
        assert back.to_dict() == env.to_dict()
    env = Environment("b", CAT[3], ObstacleState([1.0, 2.0], [0.1, -0.2]))
    np.testing.assert_allclose(env.obstacles_at(2.0)[0].position, [1.2, 1.6])
    # cycloid starts at a cusp: the robot starts at rest
    cusp = Environment("c", CAT[7], CAT[0]).initial_state()
    np.testing.assert_array_equal(cusp.qdot, 0.0)


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(small_config_dict())
    assert cfg.sim.duration == 1.0 and cfg.gp.n_max == 100 and len(cfg.catalogue) == 2
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    assert ExperimentConfig.from_dict({}) == ExperimentConfig()
    assert ExperimentConfig.from_dict(ExperimentConfig().to_dict()) == ExperimentConfig()
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"gp": {"bogus": 1}})


@pytest.fixture(scope="module")
def short_logs():
    cfg = ExperimentConfig()
    envs = [Environment("env-0-1", CAT[0], CAT[1], duration=2.0),
            Environment("env-4-2", CAT[4], CAT[2], duration=2.0)]
    return [run_mpc_episode(e, cfg.cost, cfg.robot, cfg.solver, cfg.sim,
                            header={"split": "test"}) for e in envs]


def test_self_comparison_ratio_is_one(short_logs):
    report = compare({"mpc": short_logs, "gpc": short_logs})
    for env_id in report.env_ids():
        assert report.cost_ratio(env_id, "gpc") == 1.0
    with pytest.raises(ValueError):
        compare({"mpc": short_logs + short_logs[:1]})


def test_report_totals_match_logs(short_logs, tmp_path):
    report = compare({"mpc": short_logs}, bucket_ms=1.0, seed=3)
    for lg in short_logs:
        total = sum(r.stage_cost for r in lg.records)
        assert abs(report.cost(lg.header["env_id"], "mpc") - total) <= 1e-9
    paths = write_report(report, tmp_path)
    with open(paths[0]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["env_id", "controller", "total_cost", "mean_solve_time", "std_solve_time",
                       "min_obstacle_distance", "switched_at"]
    assert len(rows) == 3
    for row, lg in zip(rows[1:], short_logs):
        assert float(row[2]) == lg.total_cost
    assert sum(report.histograms["mpc"].values()) == sum(
        r.fresh for lg in short_logs for r in lg.records)


def test_ellipse_closure_after_one_period():
    spec = CAT[3]  # circle of radius 1.3, no obstacle nearby
    period = spec.period / spec.param_rate
    env = Environment("loop", spec, ObstacleState([50.0, 50.0], [0.0, 0.0]), duration=period)
    cfg = ExperimentConfig()
    ep = run_mpc_episode(env, cfg.cost, cfg.robot, cfg.solver, cfg.sim)
    start, end = np.array(ep.records[0].q[:2]), np.array(ep.records[-1].q[:2])
    assert np.hypot(*(end - start)) <= 0.3


def test_cli_pipeline(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(small_config_dict()))
    runs = tmp_path / "runs"
    assert cli.main(["collect", "--config", str(cfg), "--out", str(runs)]) == 0
    assert len(load_runs(runs, "mpc")) == 2
    assert len(load_runs(runs, "mpc-explore")) == 1
    model = tmp_path / "m.gp"
    assert cli.main(["train", "--runs", str(runs), "--model", str(model)]) == 0
    assert cli.main(["evaluate", "--model", str(model), "--runs", str(runs), "--envs", "all"]) == 0
    assert len(load_runs(runs, "supervised")) == 2
    assert cli.main(["compare", "--runs", str(runs), "--out", str(tmp_path / "rep")]) == 0
    with open(tmp_path / "rep" / "comparison.csv") as fh:
        assert len(list(csv.reader(fh))) == 7
    assert cli.main(["export-plots", "--runs", str(runs), "--out", str(tmp_path / "plots"),
                     "--model", str(model)]) == 0
    torque = sorted((tmp_path / "plots").glob("torque_*.csv"))
    assert len(torque) == 2
    with open(torque[0]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "u_mpc_L", "u_mpc_R", "u_gpc_L", "u_gpc_R", "gp_variance"]
    assert len(rows) == 1 + 20
    assert cli.main(["train", "--runs", str(tmp_path / "nothing"), "--model", str(model)]) == 1
    assert "error" in capsys.readouterr().err
