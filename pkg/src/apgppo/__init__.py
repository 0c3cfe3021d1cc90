"""PPO with analytic-policy-gradient directed exploration on differentiable toy environments."""
from .config import TrainConfig, load_config, parse_config, serialize_config
from .estimator import APGPPOAgent
from .trainer import IterationMetrics, TrainResult, advantage_gap, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "APGPPOAgent",
    "IterationMetrics",
    "TrainConfig",
    "TrainResult",
    "advantage_gap",
    "evaluate",
    "load_config",
    "parse_config",
    "serialize_config",
    "train",
]
