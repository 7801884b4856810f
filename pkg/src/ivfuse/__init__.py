"""Infrared/visible image fusion trained with salient-object masks."""

from .errors import (ConfigError, DataError, DimensionMismatchError, ImageTooSmallError,
                     MalformedMaskError, NumericalError, IvfuseError, RemoteUnreachableError,
                     ShapeNotDivisibleError)
from .fusion_net import FusionNet, NetConfig
from .masks import MaskPartition, decompose_masks
from .metrics import MetricReport, evaluate

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DimensionMismatchError", "FusionNet", "ImageTooSmallError",
    "MalformedMaskError", "MaskPartition", "MetricReport", "NetConfig", "NumericalError",
    "IvfuseError", "RemoteUnreachableError", "ShapeNotDivisibleError", "decompose_masks",
    "evaluate",
]
