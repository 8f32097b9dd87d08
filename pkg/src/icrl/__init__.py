"""Offline in-context reinforcement learning on gridworld learning histories."""
__version__ = "0.1.0"

from .collect import LearningHistory, QLearnConfig, collect_dataset, collect_history
from .data import ContextBatch, Dataset, generate, parse_name, read_dataset, sample_context_batch, write_dataset
from .envs import EnvSpec, GridEnv, dark_room, janus, key_to_door
from .errors import ConfigError, FormatError, ICRLError, NumericalError, SpecificationError, UsageError
from .estimator import InContextRLAgent
from .evaluation import EvalCurve, EvalReport, evaluate_suite, nauc, rollout_in_context
from .model import ICRLModel, ModelConfig
from .objectives import MethodConfig, total_loss
from .training import TrainConfig, hp_search, train
