"""Experiment configuration: one JSON file drives every harness command.

JSON keys are camelCase; missing sections or keys fall back to the
defaults below, so ``{}`` is a valid configuration.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields

from .dynamics import RobotParams
from .episodes import SimSettings
from .ocp import CostWeights, SolverOptions
from .trajectories import CurveSpec


@dataclass(frozen=True)
class GpSettings:
    n_max: int = 1000
    noise: float = 1e-4
    initial_length_scale: float = 2.0
    fit_length_scales: bool = True
    fit_noise: bool = True
    n_starts: int = 3
    fit_points: int = 500
    top_fraction: float = 0.05
    # perturbed MPC episodes per training environment (0 trains on the clean logs)
    exploration_episodes: int = 2
    exploration_std: float = 0.1


@dataclass(frozen=True)
class GpcSettings:
    alpha: float = 0.5
    window: int = 10
    variance_threshold: float = 0.5


def default_catalogue() -> list[CurveSpec]:
    """Ten curves from the four families, sharing one ~8 m x 5 m workspace.

    Phases are chosen so that no two curves start within 0.8 m of each other.
    Each cycloid arch takes just over 21 s, so a 20 s episode starts at a
    cusp and its horizon never reaches the closing one.
    """
    return [
        CurveSpec("ellipse", a=4.0, b=2.25, speed=0.4, name="ellipse-wide"),
        CurveSpec("lemniscate", scale=2.0, speed=0.4, phase=6.0, name="lemniscate"),
        CurveSpec("ellipse", a=1.44, b=4.0, speed=0.35, phase=4.0, name="ellipse-tall"),
        CurveSpec("ellipse", a=1.69, b=1.69, speed=0.3, phase=14.0, center=(0.5, 0.3),
                  name="circle"),
        CurveSpec("sine", amplitude=1.0, frequency=1.0, speed=0.35, center=(-3.5, 0.0),
                  name="sine"),
        CurveSpec("sine", amplitude=0.6, frequency=1.5, speed=0.3, phase=3.0,
                  center=(-3.5, 0.8), name="sine-fast"),
        CurveSpec("lemniscate", scale=2.5, speed=0.45, phase=13.0, center=(0.0, -0.3),
                  name="lemniscate-large"),
        CurveSpec("cycloid", r=1.0, speed=0.38, center=(-3.1416, -1.0), name="cycloid"),
        CurveSpec("cycloid", r=0.8, speed=0.3, center=(-1.0, -0.8), name="cycloid-small"),
        CurveSpec("sine", amplitude=1.2, frequency=0.8, speed=0.4, phase=6.0,
                  center=(-3.5, -0.5), name="sine-slow"),
    ]


@dataclass(frozen=True)
class ExperimentConfig:
    robot: RobotParams = field(default_factory=RobotParams)
    cost: CostWeights = field(default_factory=CostWeights)
    solver: SolverOptions = field(default_factory=SolverOptions)
    sim: SimSettings = field(default_factory=SimSettings)
    gp: GpSettings = field(default_factory=GpSettings)
    gpc: GpcSettings = field(default_factory=GpcSettings)
    catalogue: tuple = field(default_factory=lambda: tuple(default_catalogue()))
    obstacle_radius: float = 0.3
    seed: int = 0
    n_train: int = 6
    n_test: int = 4
    full_sweep: bool = False

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "catalogue":
                v = [c.to_dict() for c in v]
            elif hasattr(v, "__dataclass_fields__"):
                v = {_camel(k): list(x) if isinstance(x, tuple) else x
                     for k, x in asdict(v).items()}
            out[_camel(f.name)] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {_camel(f.name): f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            f = known[key]
            if f.name == "catalogue":
                kwargs["catalogue"] = tuple(CurveSpec.from_dict(c) for c in value)
            elif f.name in _SECTIONS:
                kwargs[f.name] = _section(_SECTIONS[f.name], value)
            else:
                kwargs[f.name] = value
        return cls(**kwargs)


_SECTIONS = {"robot": RobotParams, "cost": CostWeights, "solver": SolverOptions,
             "sim": SimSettings, "gp": GpSettings, "gpc": GpcSettings}


def _camel(name: str) -> str:
    head, *rest = name.split("_")
    return head + "".join(p[:1].upper() + p[1:] for p in rest)


def _snake(name: str) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", name).lower()


def _section(cls, d: dict):
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for k, v in d.items():
        name = _snake(k)
        if name not in names:
            raise ValueError(f"unknown key {k!r} in {cls.__name__} section")
        kwargs[name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def save_config(config: ExperimentConfig, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
