"""PPO with transition filtering by predicted fraction of variance explained."""

from .agent import Collector, TrainResult, evaluate, load_agent, save_agent, train
from .approximator import ActorCritic, DenseNet, GaussianPolicy
from .config import ExperimentConfig, Variant
from .envs import Pendulum, PointMass, make_env
from .estimator import SaunaPPO
from .exceptions import ConfigurationError, SaunaError, TrainingAborted, UsageError
from .harness import compare, export_plotdata, run_experiment, run_suite
from .ppo import PpoHyperparams, clip_objective, sauna_loss, update
from .returns import discounted_returns, gae_advantages, normalize_advantages
from .vex import MedianTracker, accept_transition, adjusted_vex, vex_of_batch

__all__ = [
    "ActorCritic", "Collector", "ConfigurationError", "DenseNet", "ExperimentConfig",
    "GaussianPolicy", "MedianTracker", "Pendulum", "PointMass", "PpoHyperparams",
    "SaunaError", "SaunaPPO", "TrainResult", "TrainingAborted", "UsageError", "Variant",
    "accept_transition", "adjusted_vex", "clip_objective", "compare", "discounted_returns",
    "evaluate", "export_plotdata", "gae_advantages", "load_agent", "make_env",
    "normalize_advantages", "run_experiment", "run_suite", "save_agent", "sauna_loss",
    "train", "update", "vex_of_batch",
]
__version__ = "0.1.0"
