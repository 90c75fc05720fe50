"""MPC and Gaussian-process imitation control for a differential-drive robot."""
from .config import ExperimentConfig, load_config, save_config
from .dynamics import GeneralizedState, RobotParams, WheelTorques, acceleration, step_rk4
from .environment import Environment
from .gp import GpModel, RbfHyperparams, fit, fit_length_scales, rbf_kernel
from .gpc import GpcController, SupervisedController, SwitchStats, build_features
from .mpc import MpcController, run_mpc_episode
from .ocp import CostWeights, SolverOptions, solve_ocp, stage_cost
from .trajectories import CurveSpec, reference_window, sample_curve

__version__ = "0.1.0"

__all__ = [
    "CostWeights", "CurveSpec", "Environment", "ExperimentConfig", "GeneralizedState",
    "GpModel", "GpcController", "MpcController", "RbfHyperparams", "RobotParams",
    "SolverOptions", "SupervisedController", "SwitchStats", "WheelTorques", "acceleration",
    "build_features", "fit", "fit_length_scales", "load_config", "rbf_kernel",
    "reference_window", "run_mpc_episode", "sample_curve", "save_config", "solve_ocp",
    "stage_cost", "step_rk4",
]
