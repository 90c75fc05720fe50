"""Closed-loop simulation loop shared by every controller."""
from __future__ import annotations

import gc
import time
from dataclasses import dataclass

import numpy as np

from .dynamics import RobotParams, _step_vec
from .environment import Environment
from .errors import SingularConstraintSystem
from .ocp import CostWeights, stage_cost
from .store import OK, EpisodeLog, SampleRecord, window_digest
from .trajectories import reference_window


@dataclass(frozen=True)
class SimSettings:
    dt: float = 0.01
    duration: float = 20.0

    def steps(self, duration: float | None = None) -> int:
        return int(round((duration if duration is not None else self.duration) / self.dt))


@dataclass
class Decision:
    """What a controller returns at a control instant."""

    u: np.ndarray
    controller: str = "mpc"
    quality: str = OK
    solve_time: float = 0.0
    iterations: int | None = None
    gp_variance: float | None = None
    u_shadow: np.ndarray | None = None


@dataclass(frozen=True)
class Exploration:
    """Gaussian torque perturbation added to every fresh decision.

    Used only when collecting training data: the robot then visits states
    slightly off the expert's path, and the log keeps the expert's decision
    as ``u_expert`` next to the perturbed torque actually applied.
    """

    std: float
    seed: int = 0
    bounds: tuple = (-5.0, 5.0)


def run_episode(env: Environment, controller, weights: CostWeights, params: RobotParams,
                sim: SimSettings, duration: float | None = None, header: dict | None = None,
                control_dt: float | None = None,
                exploration: Exploration | None = None) -> EpisodeLog:
    """Simulate ``controller`` on ``env`` and log one record per simulator step.

    The controller acts every ``control_dt`` (default: the MPC step) and its
    torque is held in between.  ``controller.act(state, env, t, stage)``
    returns a ``Decision``; ``controller.reset()`` is called first.
    """
    duration = env.duration if duration is None else duration
    if not duration > 0:
        raise ValueError("duration must be positive")
    control_dt = weights.dt if control_dt is None else control_dt
    hold = max(1, int(round(control_dt / sim.dt)))
    n_steps = sim.steps(duration)
    log = EpisodeLog(dict(header or {}))
    log.header.setdefault("environment", env.to_dict())
    log.header.setdefault("horizon", weights.horizon)
    log.header.setdefault("mpc_dt", weights.dt)
    log.header.setdefault("sim_dt", sim.dt)

    controller.reset()
    s = env.initial_state(params).vector()
    pa = params.packed()
    decision = None
    applied = None
    rng = np.random.default_rng(exploration.seed) if exploration else None
    aborted = None
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(n_steps):
            t = i * sim.dt
            obstacles = env.obstacles_at(t)
            ref_head = env.reference_at(t)
            q = s[:5]
            cost = stage_cost(q, ref_head, obstacles, weights)
            fresh = i % hold == 0
            if fresh:
                decision = controller.act(s.copy(), env, t, cost)
                applied = decision.u
                if rng is not None:
                    applied = np.clip(decision.u + rng.normal(0.0, exploration.std, 2),
                                      *exploration.bounds)
            u = applied
            digest = window_digest(reference_window(env.robot_curve, t, weights.horizon, weights.dt).states)
            log.append(SampleRecord(
                t=t, q=s[:5], qdot=s[5:], obstacle_p=obstacles[0].position,
                obstacle_v=obstacles[0].velocity, r_th=obstacles[0].r_th,
                ref_head=ref_head, window_digest=digest, u=u, stage_cost=cost,
                solve_time=decision.solve_time if fresh else 0.0,
                quality=decision.quality, controller=decision.controller, fresh=fresh,
                gp_variance=decision.gp_variance if fresh else None,
                u_shadow=decision.u_shadow if fresh else None,
                iterations=decision.iterations if fresh else None,
                u_expert=decision.u if rng is not None else None))
            try:
                s = _step_vec(s, float(u[0]), float(u[1]), sim.dt, pa)
            except SingularConstraintSystem as exc:
                aborted = str(exc)
                break
    finally:
        if gc_was_enabled:
            gc.enable()
    log.summary = {
        "aborted": aborted,
        "total_cost": log.total_cost,
        "steps": len(log.records),
    }
    log.summary.update(getattr(controller, "summary", lambda: {})())
    return log


def min_obstacle_distance(log: EpisodeLog) -> float:
    q = np.array([r.q[:2] for r in log.records])
    p = np.array([r.obstacle_p for r in log.records])
    return float(np.min(np.hypot(*(q - p).T)))


def mean_tracking_error(log: EpisodeLog) -> float:
    q = np.array([r.q[:2] for r in log.records])
    ref = np.array([r.ref_head[:2] for r in log.records])
    return float(np.mean(np.hypot(*(q - ref).T)))


def solve_times(log: EpisodeLog) -> np.ndarray:
    return np.array([r.solve_time for r in log.records if r.fresh])
