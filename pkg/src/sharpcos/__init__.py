"""Sharpened cosine similarity layers, ablations and an experiment pipeline on numpy."""

from .errors import (CheckpointError, ConfigError, DataFormatError, DomainError,
                     NonFiniteError, ShapeError, UsageError)
from .layers import (BatchNorm2d, Conv2d, CosSim2d, Linear, MaxAbsPool2d, MaxPool2d, Module,
                     Parameter, SharpCosSim2d, SharpenedSDP2d)
from .models import LayerVariantConfig, ModelDescriptor, build_model
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "BatchNorm2d", "CheckpointError", "ConfigError", "Conv2d", "CosSim2d", "DataFormatError",
    "DomainError", "LayerVariantConfig", "Linear", "MaxAbsPool2d", "MaxPool2d", "ModelDescriptor",
    "Module", "NonFiniteError", "Parameter", "ShapeError", "SharpCosSim2d", "SharpenedSDP2d",
    "Tensor", "UsageError", "build_model", "no_grad",
]
