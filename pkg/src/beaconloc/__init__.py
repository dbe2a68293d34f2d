"""Beacon-based object localization.

Grid worlds with beacons, a trajectory simulator, particle and multiparticle
Kalman filter baselines, and recurrent particle-filter cells trained with a
small reverse-mode autodiff engine.
"""
__version__ = "0.1.0"

from .cells import ModelSpec, count_params  # noqa: E402
from .environment import Environment, load_map, parse_map, serialize_map  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError, DataError, LocalizationError, NumericError, SimulationError, SpecError, ValidationError,
)
from .filters import filter_dataset, run_filter  # noqa: E402
from .losses import evaluate_poses, fse, loss_l, mse_c, wmse  # noqa: E402
from .models import Checkpoint, Model, load_checkpoint, save_checkpoint  # noqa: E402
from .simulator import MotionNoiseConfig, Pose, TrajectoryDataset, generate_dataset, simulate_split  # noqa: E402
from .training import TrainConfig, evaluate, train  # noqa: E402

__all__ = [
    "Checkpoint", "ConfigError", "DataError", "Environment", "LocalizationError", "Model", "ModelSpec",
    "MotionNoiseConfig", "NumericError", "Pose", "SimulationError", "SpecError", "TrainConfig",
    "TrajectoryDataset", "ValidationError", "count_params", "evaluate", "evaluate_poses", "filter_dataset",
    "fse", "generate_dataset", "load_checkpoint", "load_map", "loss_l", "mse_c", "parse_map", "run_filter",
    "save_checkpoint", "serialize_map", "simulate_split", "train", "wmse",
]
