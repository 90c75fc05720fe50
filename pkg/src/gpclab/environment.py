from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import GeneralizedState, RobotParams, velocity_from_wheels
from .ocp import wrap_angle
from .trajectories import CurveSpec, ObstacleState, curve_velocity, obstacle_on_curve, sample_curve


@dataclass(frozen=True)
class Environment:
    """A robot reference curve paired with an obstacle motion.

    The obstacle either follows a ``CurveSpec`` or, given an
    ``ObstacleState``, moves at that state's constant velocity from t = 0.
    """

    id: str
    robot_curve: CurveSpec
    obstacle_curve: CurveSpec | ObstacleState
    r_th: float = 0.3
    duration: float = 20.0

    def __post_init__(self):
        if self.robot_curve == self.obstacle_curve:
            raise ValueError("robot and obstacle curves must differ")

    def obstacles_at(self, t: float) -> list[ObstacleState]:
        o = self.obstacle_curve
        if isinstance(o, ObstacleState):
            return [ObstacleState(o.position + o.velocity * t, o.velocity, self.r_th)]
        return [obstacle_on_curve(o, t, self.r_th)]

    def reference_at(self, t: float) -> np.ndarray:
        return np.array(sample_curve(self.robot_curve, t))

    def initial_state(self, params: RobotParams | None = None) -> GeneralizedState:
        """On the reference start, aligned with it and rolling at its speed.

        Where the reference is (nearly) stationary, e.g. a cycloid cusp, the
        robot starts at rest.
        """
        params = params or RobotParams()
        x, y, th = sample_curve(self.robot_curve, 0.0)
        q = np.array([x, y, th, 0.0, 0.0])
        v = self.reference_speed(0.0)
        if v < 1e-6:
            return GeneralizedState(q, np.zeros(5))
        h = 1e-5
        th_a = sample_curve(self.robot_curve, -h)[2]
        th_b = sample_curve(self.robot_curve, h)[2]
        omega = float(wrap_angle(th_b - th_a)) / (2 * h)
        rho, w = params.wheel_radius, params.half_track
        right = (v + omega * w) / rho
        left = (v - omega * w) / rho
        return GeneralizedState(q, velocity_from_wheels(q, right, left, params))

    def reference_speed(self, t: float) -> float:
        return float(np.hypot(*curve_velocity(self.robot_curve, t)))

    def to_dict(self) -> dict:
        o = self.obstacle_curve
        if isinstance(o, ObstacleState):
            obstacle = {"position": o.position.tolist(), "velocity": o.velocity.tolist()}
        else:
            obstacle = o.to_dict()
        return {
            "id": self.id,
            "robot_curve": self.robot_curve.to_dict(),
            "obstacle_curve": obstacle,
            "r_th": self.r_th,
            "duration": self.duration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Environment":
        o = d["obstacle_curve"]
        if "family" in o:
            obstacle = CurveSpec.from_dict(o)
        else:
            obstacle = ObstacleState(o["position"], o["velocity"], d["r_th"])
        return cls(d["id"], CurveSpec.from_dict(d["robot_curve"]), obstacle, d["r_th"], d["duration"])
