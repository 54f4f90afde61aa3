"""Likelihood-based variance-component and fixed-effect estimation for
binary probit GLMMs / GP classifiers under unit-level case-control sampling.
"""

__version__ = "0.1.0"

from .model import (
    AscertainmentScheme,
    Dataset,
    DegenerateColumnError,
    Kernel,
    ModelParams,
    grm,
    probit_conditional,
    sampling_weights,
    standardize_columns,
    thresholds,
)

__all__ = [
    "AscertainmentScheme",
    "Dataset",
    "DegenerateColumnError",
    "Kernel",
    "ModelParams",
    "grm",
    "probit_conditional",
    "sampling_weights",
    "standardize_columns",
    "thresholds",
    "__version__",
]
