"""Receding-horizon MPC for the differential-drive robot."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import GeneralizedState, RobotParams, WheelTorques
from .environment import Environment
from .episodes import Decision, Exploration, SimSettings, run_episode
from .ocp import CostWeights, SolveReport, SolverOptions, solve_ocp, stage_cost
from .store import NOT_CONVERGED, OK, EpisodeLog
from .trajectories import reference_window


@dataclass
class MpcStepOutput:
    applied: WheelTorques
    predicted: np.ndarray  # (N, 2)
    stage_cost: float
    solve_time: float
    report: SolveReport


def shift_warm_start(u: np.ndarray) -> np.ndarray:
    """Drop the first control and repeat the last one."""
    return np.vstack([u[1:], u[-1:]])


def mpc_step(state: GeneralizedState, env: Environment, t: float, weights: CostWeights,
             params: RobotParams, options: SolverOptions = SolverOptions(),
             warm_start: np.ndarray | None = None) -> MpcStepOutput:
    """Solve the horizon problem at ``t`` and return its first control.

    ``warm_start`` is used as the initial sequence as given; callers that hold
    the previous solution pass it through ``shift_warm_start`` first.
    """
    n = weights.horizon
    refs = reference_window(env.robot_curve, t + weights.dt, n, weights.dt)
    obstacles = env.obstacles_at(t)
    u0 = np.zeros((n, 2)) if warm_start is None else np.clip(warm_start, options.u_min, options.u_max)
    u, report = solve_ocp(state, refs, obstacles, weights, u0, params, options, t0=t)
    cost = stage_cost(state.q, env.reference_at(t), obstacles, weights)
    return MpcStepOutput(WheelTorques(float(u[0, 0]), float(u[0, 1])), u, cost,
                         report.cpu_time, report)


class MpcController:
    """Stateful wrapper that warm-starts each solve from the previous one."""

    name = "mpc"

    def __init__(self, weights: CostWeights, params: RobotParams,
                 options: SolverOptions = SolverOptions()):
        self.weights = weights
        self.params = params
        self.options = options
        self._prev = None
        self.last = None

    def reset(self):
        self._prev = None
        self.last = None

    def act(self, s: np.ndarray, env: Environment, t: float, stage: float) -> Decision:
        warm = None if self._prev is None else shift_warm_start(self._prev)
        out = mpc_step(GeneralizedState.from_vector(s), env, t, self.weights,
                       self.params, self.options, warm)
        self._prev = out.predicted
        self.last = out
        quality = OK if out.report.converged else NOT_CONVERGED
        return Decision(out.predicted[0].copy(), "mpc", quality, out.solve_time,
                        out.report.iterations)


def run_mpc_episode(env: Environment, weights: CostWeights, params: RobotParams,
                    options: SolverOptions = SolverOptions(), sim: SimSettings = SimSettings(),
                    duration: float | None = None, header: dict | None = None,
                    exploration: Exploration | None = None) -> EpisodeLog:
    h = {"episode_id": f"{env.id}-mpc", "env_id": env.id, "controller": "mpc"}
    h.update(header or {})
    return run_episode(env, MpcController(weights, params, options), weights, params, sim,
                       duration, h, exploration=exploration)
