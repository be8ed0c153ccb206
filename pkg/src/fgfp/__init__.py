"""Fractional Gaussian filter parameterizations, adaptive unstructured
pruning, and a small self-contained CNN engine to drive them."""

from . import aup, cli, data, fgf, ndcore, nn, pipeline, store
from .errors import (
    DimensionError,
    FgfpError,
    FitError,
    FormatError,
    IntegrityError,
    NumericError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "aup",
    "cli",
    "data",
    "fgf",
    "ndcore",
    "nn",
    "pipeline",
    "store",
    "DimensionError",
    "FgfpError",
    "FitError",
    "FormatError",
    "IntegrityError",
    "NumericError",
    "UsageError",
    "__version__",
]
