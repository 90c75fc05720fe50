"""Reference curve families, reference windows and obstacle prediction.

Four curve families are supported, each given in a local frame and then
shifted by ``center``:

* lemniscate of Gerono   x^4 - x^2 + y^2 = 0, scaled by ``scale``
* ellipse                x^2/a + y^2/b = 1  (a, b are squared semi-axes)
* sine                   y = amplitude * sin(frequency * x)
* cycloid                x = r acos(1 - y/r) - sqrt(y (2r - y))

Curves are traversed at a constant parameter rate chosen so that the mean
speed over one period equals ``speed``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np


class CurveFamily(str, Enum):
    LEMNISCATE = "lemniscate"
    ELLIPSE = "ellipse"
    SINE = "sine"
    CYCLOID = "cycloid"


@dataclass(frozen=True)
class CurveSpec:
    family: CurveFamily
    a: float = 1.0
    b: float = 1.0
    r: float = 1.0
    amplitude: float = 1.0
    frequency: float = 1.0
    scale: float = 1.0
    speed: float = 0.4
    phase: float = 0.0
    center: tuple = (0.0, 0.0)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "family", CurveFamily(self.family))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        for attr in ("a", "b", "r", "amplitude", "frequency", "scale", "speed"):
            if not getattr(self, attr) > 0:
                raise ValueError(f"{attr} must be strictly positive")

    def with_phase(self, phase: float) -> "CurveSpec":
        d = self.to_dict()
        d["phase"] = phase
        return CurveSpec(**d)

    def to_dict(self) -> dict:
        return {
            "family": self.family.value, "a": self.a, "b": self.b, "r": self.r,
            "amplitude": self.amplitude, "frequency": self.frequency,
            "scale": self.scale, "speed": self.speed, "phase": self.phase,
            "center": list(self.center), "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CurveSpec":
        return cls(**d)

    @cached_property
    def param_rate(self) -> float:
        """d(parameter)/dt giving the requested mean speed."""
        s = np.linspace(0.0, self.period, 4096, endpoint=False)
        _, d1, _ = _local(self, s)
        mean_speed = float(np.mean(np.hypot(d1[0], d1[1])))
        return self.speed / mean_speed

    @property
    def period(self) -> float:
        if self.family is CurveFamily.SINE:
            return 2.0 * math.pi / self.frequency
        return 2.0 * math.pi


def _local(spec: CurveSpec, s):
    """Point, first and second derivative w.r.t. the curve parameter."""
    s = np.asarray(s, dtype=float)
    fam = spec.family
    if fam is CurveFamily.LEMNISCATE:
        A = spec.scale
        p = (A * np.cos(s), A * np.sin(s) * np.cos(s))
        d1 = (-A * np.sin(s), A * np.cos(2 * s))
        d2 = (-A * np.cos(s), -2 * A * np.sin(2 * s))
    elif fam is CurveFamily.ELLIPSE:
        ra, rb = math.sqrt(spec.a), math.sqrt(spec.b)
        p = (ra * np.cos(s), rb * np.sin(s))
        d1 = (-ra * np.sin(s), rb * np.cos(s))
        d2 = (-ra * np.cos(s), -rb * np.sin(s))
    elif fam is CurveFamily.SINE:
        A, w = spec.amplitude, spec.frequency
        p = (s, A * np.sin(w * s))
        d1 = (np.ones_like(s), A * w * np.cos(w * s))
        d2 = (np.zeros_like(s), -A * w * w * np.sin(w * s))
    else:
        r = spec.r
        p = (r * (s - np.sin(s)), r * (1 - np.cos(s)))
        d1 = (r * (1 - np.cos(s)), r * np.sin(s))
        d2 = (r * np.sin(s), r * np.cos(s))
    return p, d1, d2


def _param(spec: CurveSpec, t):
    return spec.param_rate * (np.asarray(t, dtype=float) + spec.phase)


def _heading(d1, d2):
    dx, dy = np.asarray(d1[0], float), np.asarray(d1[1], float)
    # at a cusp the tangent vanishes; the limiting direction is that of d2
    cusp = np.hypot(dx, dy) < 1e-12
    if np.any(cusp):
        dx = np.where(cusp, d2[0], dx)
        dy = np.where(cusp, d2[1], dy)
    return np.arctan2(dy, dx)


def sample_curve(spec: CurveSpec, t):
    """Curve point and tangent heading at time ``t``; returns (x, y, theta)."""
    s = _param(spec, t)
    p, d1, d2 = _local(spec, s)
    x = p[0] + spec.center[0]
    y = p[1] + spec.center[1]
    th = _heading(d1, d2)
    if np.ndim(t) == 0:
        return float(x), float(y), float(th)
    return x, y, th


def curve_velocity(spec: CurveSpec, t) -> np.ndarray:
    """Time derivative of the curve position at ``t``."""
    _, d1, _ = _local(spec, _param(spec, t))
    return spec.param_rate * np.array([d1[0], d1[1]], dtype=float)


@dataclass(frozen=True)
class ReferenceWindow:
    times: np.ndarray
    states: np.ndarray  # (N, 5): x, y, theta, then zero padding

    def __len__(self):
        return len(self.times)

    @property
    def head(self) -> np.ndarray:
        return self.states[0, :3]


def reference_window(spec: CurveSpec, t0: float, n: int, dt: float) -> ReferenceWindow:
    if n < 1:
        raise ValueError("window length must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    times = t0 + dt * np.arange(n)
    x, y, th = sample_curve(spec, times)
    states = np.zeros((n, 5))
    states[:, 0], states[:, 1], states[:, 2] = x, y, th
    return ReferenceWindow(times, states)


@dataclass(frozen=True)
class ObstacleState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    r_th: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(2))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(2))
        if not self.r_th > 0:
            raise ValueError("r_th must be positive")
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("obstacle state must be finite")


def predict_obstacle(obs: ObstacleState, t0: float, t: float, delta: float = 0.0) -> np.ndarray:
    """Constant-velocity prediction p(t0) + v(t0) (t - t0 + delta)."""
    if t < t0:
        raise ValueError("prediction time precedes t0")
    return obs.position + obs.velocity * (t - t0 + delta)


def obstacle_on_curve(spec: CurveSpec, t: float, r_th: float) -> ObstacleState:
    x, y, _ = sample_curve(spec, t)
    return ObstacleState(np.array([x, y]), curve_velocity(spec, t), r_th)


def export_curve_csv(spec: CurveSpec, path, duration: float, dt: float = 0.05):
    times = np.arange(0.0, duration + 0.5 * dt, dt)
    x, y, th = sample_curve(spec, times)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "theta"])
        for row in zip(times, x, y, th):
            w.writerow([repr(float(v)) for v in row])
