"""Gaussian predictive controller and the MPC-to-GPC supervisor.

The GP maps a 12-dimensional, rigid-motion invariant description of the
scene to the wheel torques the MPC applied in the same situation:

    0-2   pose error to the reference head, in the robot frame (x, y, wrapped heading)
    3-5   body-frame velocities (forward, lateral, yaw rate)
    6-7   obstacle position relative to the robot, robot frame
    8-9   obstacle velocity relative to the robot, robot frame
    10-11 where the end-of-horizon reference point lies relative to where the
          robot would be at that time if it kept its current speed and turn
          rate (longitudinal, lateral; robot frame)

The last pair is what the reference asks of the robot beyond coasting; near
the reference the MPC torques are essentially a function of it.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .dynamics import GeneralizedState, WheelTorques
from .environment import Environment
from .episodes import Decision, SimSettings, run_episode
from .gp import GpModel
from .mpc import MpcController
from .ocp import CostWeights, SolverOptions, stage_cost, wrap_angle
from .store import OK, EpisodeLog
from .trajectories import ReferenceWindow, reference_window

N_FEATURES = 12


@dataclass(frozen=True)
class SwitchStats:
    mu: float
    sigma: float
    alpha: float = 0.5

    def __post_init__(self):
        if self.sigma < 0 or self.alpha < 0:
            raise ValueError("sigma and alpha must be non-negative")

    @property
    def threshold(self) -> float:
        return self.mu - self.alpha * self.sigma

    def to_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "alpha": self.alpha}


def feature_window(env: Environment, t: float, n: int, dt: float) -> ReferenceWindow:
    """Reference window the features are computed from (head at ``t``)."""
    return reference_window(env.robot_curve, t, n, dt)


def build_features(state, obstacle_p, obstacle_v, refs: ReferenceWindow) -> np.ndarray:
    if len(refs) < 2:
        raise ValueError("feature window needs at least two points")
    s = state.vector() if isinstance(state, GeneralizedState) else np.asarray(state, float)
    x, y, th = s[0], s[1], s[2]
    xd, yd, thd = s[5], s[6], s[7]
    c, sn = math.cos(th), math.sin(th)

    def body(wx, wy):
        return c * wx + sn * wy, -sn * wx + c * wy

    head = refs.states[0]
    end = refs.states[-1]
    ex, ey = body(x - head[0], y - head[1])
    v, vlat = body(xd, yd)
    px, py = body(obstacle_p[0] - x, obstacle_p[1] - y)
    vx, vy = body(obstacle_v[0] - xd, obstacle_v[1] - yd)
    # coasting arc of the robot over the window span
    tau = refs.times[-1] - refs.times[0]
    if abs(thd) > 1e-9:
        cx, cy = v * math.sin(thd * tau) / thd, v * (1.0 - math.cos(thd * tau)) / thd
    else:
        cx, cy = v * tau, 0.0
    rx, ry = body(end[0] - x, end[1] - y)
    return np.array([ex, ey, wrap_angle(th - head[2]), v, vlat, thd,
                     px, py, vx, vy, rx - cx, ry - cy])


def running_cost(state, env: Environment, t: float, weights: CostWeights) -> float:
    """C_g at the current instant; the same function the MPC logs as stage cost."""
    s = state.vector() if isinstance(state, GeneralizedState) else np.asarray(state, float)
    return stage_cost(s[:5], env.reference_at(t), env.obstacles_at(t), weights)


def switch_decision(c_g: float, stats: SwitchStats) -> bool:
    return c_g < stats.mu - stats.alpha * stats.sigma


def gpc_step(model: GpModel, state, env: Environment, t: float, refs: ReferenceWindow,
             bounds=(-5.0, 5.0)):
    """Clamped GP mean torque and the predictive variance."""
    obs = env.obstacles_at(t)[0]
    mean, var = model.predict(build_features(state, obs.position, obs.velocity, refs))
    u = np.clip(mean, bounds[0], bounds[1])
    return WheelTorques(float(u[0]), float(u[1])), var


class GpcController:
    name = "gpc"

    def __init__(self, model: GpModel, weights: CostWeights,
                 options: SolverOptions = SolverOptions()):
        if model.d != N_FEATURES:
            raise ValueError(f"model expects {model.d} features, controller builds {N_FEATURES}")
        self.model = model
        self.weights = weights
        self.bounds = options.bounds

    def reset(self):
        pass

    def act(self, s, env: Environment, t: float, stage: float) -> Decision:
        start = time.thread_time()
        refs = feature_window(env, t, self.weights.horizon, self.weights.dt)
        tau, var = gpc_step(self.model, s, env, t, refs, self.bounds)
        elapsed = time.thread_time() - start
        return Decision(tau.as_array(), "gpc", OK, elapsed, None, var)


class SupervisedController:
    """Runs the MPC until the switching rule holds for ``window`` steps in a row.

    The rule is evaluated at every control step on the live state.  Once
    switched, the GPC drives; if its predictive variance exceeds
    ``variance_threshold`` the supervisor falls back to the MPC for the rest
    of the episode.
    """

    name = "supervised"

    def __init__(self, mpc: MpcController, gpc: GpcController, stats: SwitchStats,
                 window: int = 10, variance_threshold: float = 0.5):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.mpc = mpc
        self.gpc = gpc
        self.stats = stats
        self.window = window
        self.variance_threshold = variance_threshold
        self.reset()

    def reset(self):
        self.mpc.reset()
        self.gpc.reset()
        self.mode = "mpc"
        self.streak = 0
        self.step = 0
        self.switch_step = None
        self.switch_time = None
        self.revert_step = None

    def act(self, s, env: Environment, t: float, stage: float) -> Decision:
        k = self.step
        self.step += 1
        if self.mode == "gpc":
            d = self.gpc.act(s, env, t, stage)
            if d.gp_variance <= self.variance_threshold:
                return d
            self.mode = "reverted"
            self.revert_step = k
            self.mpc.reset()
        d = self.mpc.act(s, env, t, stage)
        if self.mode == "mpc":
            self.streak = self.streak + 1 if switch_decision(stage, self.stats) else 0
            if self.streak >= self.window:
                self.mode = "gpc"
                self.switch_step = k + 1
                self.switch_time = t + self.mpc.weights.dt
        return d

    def summary(self) -> dict:
        return {"switch_step": self.switch_step, "switch_time": self.switch_time,
                "revert_step": self.revert_step, "threshold": self.stats.threshold}


def run_gpc_episode(env: Environment, model: GpModel, weights: CostWeights, params,
                    options: SolverOptions = SolverOptions(), sim: SimSettings = SimSettings(),
                    duration: float | None = None, header: dict | None = None) -> EpisodeLog:
    h = {"episode_id": f"{env.id}-gpc", "env_id": env.id, "controller": "gpc"}
    h.update(header or {})
    return run_episode(env, GpcController(model, weights, options), weights, params, sim,
                       duration, h)


def run_supervised_episode(env: Environment, model: GpModel, stats: SwitchStats,
                           weights: CostWeights, params, options: SolverOptions = SolverOptions(),
                           sim: SimSettings = SimSettings(), window: int = 10,
                           variance_threshold: float = 0.5, duration: float | None = None,
                           header: dict | None = None) -> EpisodeLog:
    ctrl = SupervisedController(MpcController(weights, params, options),
                                GpcController(model, weights, options), stats, window,
                                variance_threshold)
    h = {"episode_id": f"{env.id}-supervised", "env_id": env.id, "controller": "supervised"}
    h.update(header or {})
    return run_episode(env, ctrl, weights, params, sim, duration, h)
