"""Adaptive joint-action sampling for independent multi-agent policy gradients."""

from .behavior import BehaviorUpdateConfig, update_behavior
from .envs import GAME_IDS, make_game, step, true_visitation
from .errors import (
    DegenerateRatioError,
    InvalidArgumentError,
    NumericError,
    ParseError,
    PreconditionError,
    UnsupportedGameError,
)
from .harness import ExperimentConfig, RunRecord, load_run, persist_run, run_sampling_error, run_training
from .policy import MODES, init_behavior, random_joint_policy, sample_joint
from .ppo import PpoConfig, compute_gae, ppo_update

__version__ = "0.1.0"

__all__ = [
    "BehaviorUpdateConfig",
    "DegenerateRatioError",
    "ExperimentConfig",
    "GAME_IDS",
    "InvalidArgumentError",
    "MODES",
    "NumericError",
    "ParseError",
    "PpoConfig",
    "PreconditionError",
    "RunRecord",
    "UnsupportedGameError",
    "compute_gae",
    "init_behavior",
    "load_run",
    "make_game",
    "persist_run",
    "ppo_update",
    "random_joint_policy",
    "run_sampling_error",
    "run_training",
    "sample_joint",
    "step",
    "true_visitation",
    "update_behavior",
]
