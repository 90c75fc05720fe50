"""Experiment orchestration: environments, data collection, training, evaluation, reports."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .environment import Environment
from .episodes import Exploration, min_obstacle_distance, solve_times
from .errors import CatalogueSizeMismatch
from .gp import GpModel, RbfHyperparams, fit, fit_length_scales
from .gpc import (SwitchStats, build_features, feature_window, run_gpc_episode,
                  run_supervised_episode)
from .mpc import run_mpc_episode
from .store import (EpisodeLog, build_training_set, config_hash, load_episode, save_episode,
                    training_cost_stats)

log = logging.getLogger(__name__)

CATALOGUE_SIZE = 10
CONTROLLERS = ("mpc", "gpc", "supervised")
EXPLORE_DIR = "mpc-explore"
TIMING_FIELDS = ("solve_time", "wall_time", "cpu_time", "mean_solve_time", "std_solve_time",
                 "fit_seconds")


def generate_environments(catalogue, r_th: float = 0.3, duration: float = 20.0,
                          require_size: int | None = CATALOGUE_SIZE) -> list[Environment]:
    """Every ordered (robot, obstacle) pair of distinct catalogue curves."""
    catalogue = list(catalogue)
    if require_size is not None and len(catalogue) not in (require_size, 2):
        raise CatalogueSizeMismatch(f"catalogue has {len(catalogue)} curves, expected {require_size}")
    if len(set(catalogue)) != len(catalogue):
        raise ValueError("catalogue curves must be distinct")
    envs = []
    for i, robot in enumerate(catalogue):
        for j, obstacle in enumerate(catalogue):
            if i != j:
                envs.append(Environment(f"env-{i}-{j}", robot, obstacle, r_th, duration))
    return envs


def split_environments(envs, n_train: int, n_test: int, seed: int):
    """Disjoint seeded train/test draw from ``envs``."""
    if n_train + n_test > len(envs):
        raise ValueError(f"cannot draw {n_train}+{n_test} environments from {len(envs)}")
    order = np.random.default_rng(seed).permutation(len(envs))
    train = [envs[i] for i in sorted(order[:n_train])]
    test = [envs[i] for i in sorted(order[n_train:n_train + n_test])]
    return train, test


def experiment_environments(config: ExperimentConfig):
    envs = generate_environments(config.catalogue, config.obstacle_radius, config.sim.duration)
    if config.full_sweep:
        log.warning("full sweep: %d environments, expect a long run", len(envs))
        n_train = int(round(len(envs) * config.n_train / (config.n_train + config.n_test)))
        return split_environments(envs, n_train, len(envs) - n_train, config.seed)
    return split_environments(envs, config.n_train, config.n_test, config.seed)


def _header(config: ExperimentConfig, split: str) -> dict:
    return {"config_hash": config_hash(config.to_dict()), "seed": config.seed, "split": split}


# collection and training ---------------------------------------------------

def collect(config: ExperimentConfig, out_dir, envs=None) -> list[Path]:
    """Run and persist MPC episodes.

    Every environment gets one clean episode under ``mpc/``; training
    environments additionally get ``config.gp.exploration_episodes``
    torque-perturbed episodes under ``mpc-explore/``.  The GP learns from
    both: the clean logs pin down the on-path torques, the perturbed ones
    show how the MPC corrects deviations.
    """
    out = Path(out_dir)
    (out / "mpc").mkdir(parents=True, exist_ok=True)
    if envs is None:
        train, test = experiment_environments(config)
        envs = [(e, "train") for e in train] + [(e, "test") for e in test]
    jobs = []
    for i, (env, split) in enumerate(envs):
        jobs.append((env, split, out / "mpc" / f"{env.id}.jsonl", None))
        if split == "train":
            for k in range(config.gp.exploration_episodes):
                ex = Exploration(config.gp.exploration_std, seed=config.seed * 1000 + 10 * i + k,
                                 bounds=config.solver.bounds)
                jobs.append((env, split, out / EXPLORE_DIR / f"{env.id}-{k}.jsonl", ex))
    paths, failures = [], []
    for env, split, path, ex in jobs:
        header = _header(config, split)
        if ex is not None:
            header["episode_id"] = f"{env.id}-mpc-explore-{path.stem.rsplit('-', 1)[1]}"
        try:
            ep = run_mpc_episode(env, config.cost, config.robot, config.solver, config.sim,
                                 header=header, exploration=ex)
        except Exception as exc:  # persisted as a manifest, then re-raised at the end
            failures.append({"env_id": env.id, "error": repr(exc)})
            continue
        path.parent.mkdir(parents=True, exist_ok=True)
        save_episode(path, ep)
        paths.append(path)
    _write_manifest(out, "collect", failures)
    return paths


def _write_manifest(out: Path, stage: str, failures: list):
    path = out / f"{stage}-failures.json"
    if failures:
        path.write_text(json.dumps(failures, indent=2) + "\n")
        raise RuntimeError(f"{stage}: {len(failures)} environment(s) failed, see {path}")
    if path.exists():
        path.unlink()


def load_runs(runs_dir, controller: str = "mpc", split: str | None = None) -> list[EpisodeLog]:
    d = Path(runs_dir) / controller
    logs = [load_episode(p) for p in sorted(d.glob("*.jsonl"))]
    if split is not None:
        logs = [lg for lg in logs if lg.header.get("split") == split]
    return logs


def training_episodes(runs_dir) -> list[EpisodeLog]:
    """GP training logs: the clean training MPC episodes plus the exploratory ones."""
    return load_runs(runs_dir, "mpc", "train") + load_runs(runs_dir, EXPLORE_DIR)


@dataclass
class TrainedModel:
    model: GpModel
    stats: SwitchStats
    n_train: int
    provenance: list = field(repr=False, default_factory=list)


def train(config: ExperimentConfig, episodes, model_path=None, stats_episodes=None
          ) -> TrainedModel:
    """Build the training set, fit hyperparameters and the GP, compute switch stats.

    ``episodes`` supply the GP data; switch statistics come from
    ``stats_episodes`` (the clean MPC training logs) when given, else from
    ``episodes``.
    """
    ts = build_training_set(episodes, config.gp.n_max, config.gp.top_fraction,
                            config.cost.horizon)
    h0 = RbfHyperparams.isotropic(ts.X.shape[1], config.gp.initial_length_scale, config.gp.noise)
    hyper = h0
    if config.gp.fit_length_scales:
        hyper = fit_length_scales(ts.X, ts.Y, h0, n_starts=config.gp.n_starts, seed=config.seed,
                                  fit_noise=config.gp.fit_noise, max_points=config.gp.fit_points)
    model = fit(ts.X, ts.Y, hyper)
    stats = training_cost_stats(stats_episodes or episodes, config.gpc.alpha)
    if model_path is not None:
        model.save(model_path, extra={
            "switch_stats": stats.to_dict(),
            "config_hash": config_hash(config.to_dict()),
            "episodes": [lg.episode_id for lg in episodes],
            "provenance": [list(p) for p in ts.provenance],
        })
    return TrainedModel(model, stats, len(ts), ts.provenance)


def load_trained(model_path) -> TrainedModel:
    model = GpModel.load(model_path)
    s = model.extra["switch_stats"]
    return TrainedModel(model, SwitchStats(s["mu"], s["sigma"], s["alpha"]), model.n,
                        [tuple(p) for p in model.extra.get("provenance", [])])


# evaluation ------------------------------------------------------------------

def evaluate(config: ExperimentConfig, trained: TrainedModel, out_dir, envs) -> dict:
    """Run pure-GPC and supervised episodes on ``envs`` (pairs of (env, split))."""
    out = Path(out_dir)
    paths = {"gpc": [], "supervised": []}
    failures = []
    for env, split in envs:
        h = _header(config, split)
        try:
            g = run_gpc_episode(env, trained.model, config.cost, config.robot, config.solver,
                                config.sim, header=h)
            s = run_supervised_episode(env, trained.model, trained.stats, config.cost,
                                       config.robot, config.solver, config.sim,
                                       config.gpc.window, config.gpc.variance_threshold,
                                       header=h)
        except Exception as exc:
            failures.append({"env_id": env.id, "error": repr(exc)})
            continue
        for name, ep in (("gpc", g), ("supervised", s)):
            (out / name).mkdir(parents=True, exist_ok=True)
            p = out / name / f"{env.id}.jsonl"
            save_episode(p, ep)
            paths[name].append(p)
    _write_manifest(out, "evaluate", failures)
    return paths


def shadow_trace(model: GpModel, episode: EpisodeLog, horizon: int | None = None):
    """GPC outputs on the states of a recorded episode, without actuation.

    Returns (t, u_logged, u_gpc, variance) over the fresh control steps.
    """
    env = Environment.from_dict(episode.header["environment"])
    n = horizon or episode.header.get("horizon", 15)
    dt = episode.header.get("mpc_dt", 0.05)
    rows = [r for r in episode.records if r.fresh]
    X = np.array([build_features(r.state_vector(), r.obstacle_p, r.obstacle_v,
                                 feature_window(env, r.t, n, dt)) for r in rows])
    mean, var = model.predict_batch(X)
    t = np.array([r.t for r in rows])
    u = np.array([r.u for r in rows])
    return t, u, mean, var


def shadow_metrics(model: GpModel, episode: EpisodeLog, bounds=(-5.0, 5.0),
                   variance_threshold: float = 0.5) -> dict:
    """Torque RMS error of the clamped GPC against the logged MPC torques."""
    _, u, mean, var = shadow_trace(model, episode)
    err = np.clip(mean, *bounds) - u
    rms_err = float(np.sqrt(np.mean(err ** 2)))
    rms_mpc = float(np.sqrt(np.mean(u ** 2)))
    return {"rms_error": rms_err, "rms_mpc": rms_mpc,
            "relative_error": rms_err / rms_mpc if rms_mpc > 0 else math.inf,
            "variance_ok_fraction": float(np.mean(var < variance_threshold))}


# reporting -------------------------------------------------------------------

def histogram_buckets(times, width: float) -> dict:
    """Count values per [k*width, (k+1)*width) bucket, labelled "lo-hi"."""
    counts: dict[int, int] = {}
    for v in times:
        k = int(math.floor(v / width))
        counts[k] = counts.get(k, 0) + 1
    return {f"{_fmt(k * width)}-{_fmt((k + 1) * width)}": counts[k] for k in sorted(counts)}


def _fmt(x: float) -> str:
    return f"{x:g}"


@dataclass
class ComparisonRow:
    env_id: str
    controller: str
    total_cost: float
    mean_solve_time: float
    std_solve_time: float
    min_obstacle_distance: float
    switched_at: int | None
    split: str = ""


@dataclass
class ComparisonReport:
    rows: list
    histograms: dict
    seed: int | None = None

    def cost(self, env_id: str, controller: str) -> float:
        return self.row(env_id, controller).total_cost

    def row(self, env_id: str, controller: str) -> ComparisonRow:
        for r in self.rows:
            if r.env_id == env_id and r.controller == controller:
                return r
        raise KeyError((env_id, controller))

    def cost_ratio(self, env_id: str, controller: str, baseline: str = "mpc") -> float:
        return self.cost(env_id, controller) / self.cost(env_id, baseline)

    def env_ids(self) -> list[str]:
        return sorted({r.env_id for r in self.rows})


def compare(logs_by_controller: dict, bucket_ms: float = 1.0, seed: int | None = None
            ) -> ComparisonReport:
    """Aggregate per-episode metrics; ``logs_by_controller`` maps name to logs."""
    rows, hist = [], {}
    for name, logs in logs_by_controller.items():
        seen = set()
        all_times = []
        for lg in logs:
            env_id = lg.header.get("env_id", lg.episode_id)
            if env_id in seen:
                raise ValueError(f"{env_id} appears twice for {name}")
            seen.add(env_id)
            t = solve_times(lg) * 1e3
            all_times.extend(t.tolist())
            switched = lg.summary.get("switch_step") if lg.summary else None
            rows.append(ComparisonRow(env_id, name, lg.total_cost,
                                      float(np.mean(t)) if len(t) else 0.0,
                                      float(np.std(t)) if len(t) else 0.0,
                                      min_obstacle_distance(lg), switched,
                                      lg.header.get("split", "")))
        hist[name] = histogram_buckets(all_times, bucket_ms)
    rows.sort(key=lambda r: (r.env_id, r.controller))
    return ComparisonReport(rows, hist, seed)


def write_report(report: ComparisonReport, out_dir, include_timing: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["env_id", "controller", "total_cost", "mean_solve_time", "std_solve_time",
            "min_obstacle_distance", "switched_at"]
    if not include_timing:
        cols = [c for c in cols if c not in TIMING_FIELDS]
    table = out / "comparison.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in report.rows:
            w.writerow([_cell(getattr(r, c)) for c in cols])
    paths = [table]
    if include_timing:
        hpath = out / "solve_time_histogram.csv"
        with open(hpath, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["controller", "bucket_ms", "count"])
            for name, buckets in report.histograms.items():
                for b, c in buckets.items():
                    w.writerow([name, b, c])
        paths.append(hpath)
    return paths


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def export_plots(runs_dir, out_dir, model: GpModel | None = None) -> list[Path]:
    """Per-environment torque traces and trajectory overlays as CSV.

    Torque traces pair each MPC episode with the GPC evaluated in shadow mode
    on the same states (requires ``model``); without a model the GPC columns
    are left empty.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for ep in load_runs(runs_dir, "mpc"):
        env_id = ep.header.get("env_id", ep.episode_id)
        path = out / f"torque_{env_id}.csv"
        rows = [r for r in ep.records if r.fresh]
        if model is not None:
            _, _, mean, var = shadow_trace(model, ep)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "u_mpc_L", "u_mpc_R", "u_gpc_L", "u_gpc_R", "gp_variance"])
            for k, r in enumerate(rows):
                g = ([repr(float(mean[k, 1])), repr(float(mean[k, 0])), repr(float(var[k]))]
                     if model is not None else ["", "", ""])
                w.writerow([repr(r.t), repr(float(r.u[1])), repr(float(r.u[0])), g[0], g[1], g[2]])
        written.append(path)
    for controller in CONTROLLERS:
        for ep in load_runs(runs_dir, controller):
            env_id = ep.header.get("env_id", ep.episode_id)
            path = out / f"trajectory_{controller}_{env_id}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["t", "x_ref", "y_ref", "x", "y", "x_obs", "y_obs"])
                for r in ep.records:
                    w.writerow([repr(r.t), repr(float(r.ref_head[0])), repr(float(r.ref_head[1])),
                                repr(float(r.q[0])), repr(float(r.q[1])),
                                repr(float(r.obstacle_p[0])), repr(float(r.obstacle_p[1]))])
            written.append(path)
    return written


# full recipe -------------------------------------------------------------------

def run_recipe(config: ExperimentConfig, out_dir) -> ComparisonReport:
    """collect -> train -> evaluate -> compare, all under ``out_dir``."""
    out = Path(out_dir)
    train_envs, test_envs = experiment_environments(config)
    pairs = [(e, "train") for e in train_envs] + [(e, "test") for e in test_envs]
    collect(config, out, pairs)
    trained = train(config, training_episodes(out), out / "model.gp",
                    load_runs(out, "mpc", "train"))
    evaluate(config, trained, out, pairs)
    report = compare({c: load_runs(out, c) for c in CONTROLLERS}, seed=config.seed)
    write_report(report, out / "report")
    return report


def strip_timing(obj):
    """Copy of a JSON-like object with every wall-time field removed."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj
