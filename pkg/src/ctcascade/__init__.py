"""Cascaded residual CNN denoising of simulated low-dose CT slices."""
__version__ = "0.1.0"

from .errors import (CascadeError, ConfigurationError, ContractError, FormatError, NonFiniteError,
                     ParameterError, ShapeError, TrainingDivergence)
from .kernels import BACKEND

__all__ = [
    "__version__", "BACKEND", "CascadeError", "ConfigurationError", "ContractError", "FormatError",
    "NonFiniteError", "ParameterError", "ShapeError", "TrainingDivergence",
]
