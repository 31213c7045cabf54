"""Adaptive vision/keyword fusion and report generation, desk scale.

Everything runs on a small numpy-backed tensor engine with reverse-mode
autodiff so each component's gradients are checkable by finite differences.
"""

from .config import ModelConfig, TrainConfig, ConfigError
from .model import ReportModel, FusionState, LossReport
from .tensor import Tensor, grad_check, set_default_dtype

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "ConfigError",
    "ReportModel",
    "FusionState",
    "LossReport",
    "Tensor",
    "grad_check",
    "set_default_dtype",
]

__version__ = "0.1.0"
