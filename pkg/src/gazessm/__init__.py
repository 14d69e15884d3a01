"""Missingness-aware eye-tracking time-series classification.

Irregular recordings are encoded as values + observation masks +
log-scaled time-deltas, classified by a bidirectional selective
state-space model, and evaluated under participant-level
cross-validation with class-imbalance corrections.
"""

from . import bench, errors, evaluation, ingest, metrics, model, numerics, ssm, train, xmd

__version__ = "0.1.0"

__all__ = [
    "bench",
    "errors",
    "evaluation",
    "ingest",
    "metrics",
    "model",
    "numerics",
    "ssm",
    "train",
    "xmd",
    "__version__",
]
