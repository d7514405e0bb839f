"""Numpy engine for a semantically guided, global-local collaborative super-resolution network."""

from .config import ConfigError, ModelConfig
from .model import build, count_multiply_adds, count_params, forward, load_checkpoint, save_checkpoint
from .params import ParameterStore
from .prior import PriorMap, VggSlice
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["ConfigError", "ModelConfig", "ParameterStore", "PriorMap", "Tensor", "VggSlice", "build",
           "count_multiply_adds", "count_params", "forward", "load_checkpoint", "no_grad", "save_checkpoint"]
