"""Stereo disparity estimation with a feature-constancy refinement network, on numpy."""

from .errors import ConfigError, FormatError, IResNetError, NumericalError
from .model import ModelConfig, build_model, count_params, iresnet_forward
from .training import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "IResNetError",
    "ModelConfig",
    "NumericalError",
    "TrainConfig",
    "build_model",
    "count_params",
    "iresnet_forward",
    "train_loop",
]
