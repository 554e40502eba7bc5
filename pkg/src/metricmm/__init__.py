"""Metric-learned multimodal state estimation with inverse-distance fusion and SAC."""

from metricmm.errors import ConfigurationError, NumericalError, ShapeError, UsageError
from metricmm.model import (
    MetricEstimator,
    MetricMM,
    build_metricmm,
    fuse_idw,
    total_representation_loss,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "MetricEstimator", "MetricMM", "NumericalError", "ShapeError", "UsageError",
    "build_metricmm", "fuse_idw", "total_representation_loss",
]
