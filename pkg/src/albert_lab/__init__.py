"""Toy-scale ALBERT pretraining lab: factorized embeddings, cross-layer sharing, MLM/NSP/SOP."""

from .model import ModelConfig, ParameterStore, build_model, count_parameters, forward, validate_config
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "ParameterStore",
    "Tensor",
    "build_model",
    "count_parameters",
    "forward",
    "validate_config",
]
__version__ = "0.1.0"
