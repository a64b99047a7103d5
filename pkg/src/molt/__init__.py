"""Layer-wise token distillation adapters for frozen audio/visual transformer stacks."""

from .config import ConfigError, MoltConfig, load_config
from .tensor import DeterminismError, NonFiniteError, ShapeError, Tensor
from .trainer import (MetricsRecord, MoltModel, TrainingDiverged, count_trainable, estimate_activation_memory,
                      evaluate, run_grad_suite, train)

__all__ = [
    "ConfigError", "DeterminismError", "MetricsRecord", "MoltConfig", "MoltModel", "NonFiniteError",
    "ShapeError", "Tensor", "TrainingDiverged", "count_trainable", "estimate_activation_memory", "evaluate",
    "load_config", "run_grad_suite", "train",
]
__version__ = "0.1.0"
