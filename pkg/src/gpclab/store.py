"""Episode logs, training-set construction and cost statistics.

Episode files are JSON Lines: a header object (schema version, config hash,
episode metadata), one object per simulator step, and a closing summary
object.  Floats are written with ``repr`` precision, which round-trips
every double exactly.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyAfterFiltering, InsufficientData, OrderViolation

SCHEMA_VERSION = 1
OK = "ok"
NOT_CONVERGED = "notConverged"


@dataclass
class SampleRecord:
    t: float
    q: list
    qdot: list
    obstacle_p: list
    obstacle_v: list
    r_th: float
    ref_head: list
    window_digest: str
    u: list
    stage_cost: float
    solve_time: float
    quality: str = OK
    controller: str = "mpc"
    fresh: bool = True
    gp_variance: float | None = None
    u_shadow: list | None = None
    iterations: int | None = None
    u_expert: list | None = None

    def __post_init__(self):
        for name in ("q", "qdot", "obstacle_p", "obstacle_v", "ref_head", "u"):
            setattr(self, name, [float(v) for v in getattr(self, name)])
        for name in ("t", "r_th", "stage_cost", "solve_time"):
            setattr(self, name, float(getattr(self, name)))
        for name in ("u_shadow", "u_expert"):
            if getattr(self, name) is not None:
                setattr(self, name, [float(v) for v in getattr(self, name)])
        if self.gp_variance is not None:
            self.gp_variance = float(self.gp_variance)
        if self.quality not in (OK, NOT_CONVERGED):
            raise ValueError(f"unknown quality flag {self.quality!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(**d)

    def state_vector(self) -> np.ndarray:
        return np.array(self.q + self.qdot)


def window_digest(states: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(states, dtype="<f8").tobytes()).hexdigest()[:16]


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


@dataclass
class EpisodeLog:
    header: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def episode_id(self) -> str:
        return self.header.get("episode_id", "")

    def append(self, record: SampleRecord):
        if self.records and not record.t > self.records[-1].t:
            raise OrderViolation(
                f"episode {self.episode_id}: t={record.t} does not follow t={self.records[-1].t}")
        self.records.append(record)

    @property
    def total_cost(self) -> float:
        return math.fsum(r.stage_cost for r in self.records)

    def array(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


class EpisodeWriter:
    """Append-only writer for one episode file."""

    def __init__(self, path, header: dict):
        self.path = Path(path)
        self.header = dict(header)
        self._last_t = None
        try:
            self._fh = open(self.path, "w")
            self._fh.write(_dumps({"schema": SCHEMA_VERSION, **self.header}) + "\n")
        except OSError as exc:
            raise OSError(f"episode {self.header.get('episode_id')}: {exc}") from exc

    def append(self, record: SampleRecord):
        if self._last_t is not None and not record.t > self._last_t:
            raise OrderViolation(
                f"episode {self.header.get('episode_id')}: t={record.t} does not follow t={self._last_t}")
        try:
            self._fh.write(_dumps(record.to_dict()) + "\n")
        except OSError as exc:
            raise OSError(f"episode {self.header.get('episode_id')}: {exc}") from exc
        self._last_t = record.t

    def close(self, summary: dict | None = None):
        if self._fh.closed:
            return
        try:
            self._fh.write(_dumps({"summary": summary or {}}) + "\n")
            self._fh.flush()
        finally:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def append_sample(writer: EpisodeWriter, record: SampleRecord):
    writer.append(record)


def save_episode(path, log: EpisodeLog):
    header = {k: v for k, v in log.header.items() if k != "schema"}
    with EpisodeWriter(path, header) as w:
        for r in log.records:
            w.append(r)
        w.close(log.summary)


def load_episode(path) -> EpisodeLog:
    header, records, summary = None, [], {}
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            if header is None:
                header = obj
            elif "summary" in obj and len(obj) == 1:
                summary = obj["summary"]
            else:
                records.append(SampleRecord.from_dict(obj))
    if header is None:
        raise ValueError(f"{path}: empty episode file")
    if header.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema {header.get('schema')}")
    return EpisodeLog(header, records, summary)


# --------------------------------------------------------------------------
# training data

@dataclass
class TrainingSet:
    X: np.ndarray
    Y: np.ndarray
    provenance: list  # (episode id, step index) per row

    def __len__(self):
        return self.X.shape[0]


def _episode_env(log: EpisodeLog):
    from .environment import Environment
    return Environment.from_dict(log.header["environment"])


def training_candidates(episodes, weights=None, horizon: int | None = None):
    """Recompute features for every usable row of every episode.

    A row is usable when it was produced by a fresh MPC solve and flagged ok.
    The label is the MPC's own decision, which differs from the applied
    torque in exploration episodes.
    """
    from .gpc import build_features, feature_window

    X, Y, cost, prov = [], [], [], []
    for log in episodes:
        env = _episode_env(log)
        n = horizon or log.header.get("horizon", 15)
        dt = log.header.get("mpc_dt", 0.05)
        for i, r in enumerate(log.records):
            if r.controller != "mpc" or not r.fresh or r.quality != OK:
                continue
            state = r.state_vector()
            refs = feature_window(env, r.t, n, dt)
            X.append(build_features(state, r.obstacle_p, r.obstacle_v, refs))
            Y.append(r.u if r.u_expert is None else r.u_expert)
            cost.append(r.stage_cost)
            prov.append((log.episode_id, i))
    return X, Y, cost, prov


def build_training_set(episodes, n_max: int = 2000, top_fraction: float = 0.05,
                       horizon: int | None = None) -> TrainingSet:
    """Stride-subsample usable rows to ``n_max`` keeping the top-cost rows."""
    if not episodes:
        raise ValueError("need at least one episode")
    X, Y, cost, prov = training_candidates(episodes, horizon=horizon)
    n = len(X)
    if n == 0:
        raise EmptyAfterFiltering("every sample was flagged or held")
    if n <= n_max:
        keep = list(range(n))
    else:
        n_top = min(int(math.ceil(top_fraction * n_max)), n_max)
        order = np.argsort(-np.asarray(cost), kind="stable")
        forced = set(int(i) for i in order[:n_top])
        stride = int(math.ceil(n / n_max))
        chosen = set(range(0, n, stride)) | forced
        keep = sorted(chosen)
        if len(keep) > n_max:
            # drop stride picks (never forced ones) from the end until within the cap
            extra = len(keep) - n_max
            for i in reversed(keep):
                if extra == 0:
                    break
                if i not in forced:
                    chosen.discard(i)
                    extra -= 1
            keep = sorted(chosen)
    return TrainingSet(np.array([X[i] for i in keep]), np.array([Y[i] for i in keep]),
                       [prov[i] for i in keep])


def training_cost_stats(episodes, alpha: float = 0.5):
    """Mean and population std of ok-flagged MPC stage costs."""
    from .gpc import SwitchStats

    costs = [r.stage_cost for log in episodes for r in log.records
             if r.quality == OK and r.controller == "mpc"]
    if len(costs) < 2:
        raise InsufficientData("need at least two ok samples")
    c = np.asarray(costs)
    return SwitchStats(float(np.mean(c)), float(np.std(c)), alpha)
