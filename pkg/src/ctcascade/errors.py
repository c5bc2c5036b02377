"""Exception types shared across the package."""


class CascadeError(Exception):
    """Base class for all package errors."""


class ShapeError(CascadeError, ValueError):
    """Tensor extents or channel counts do not fit the operation."""


class ParameterError(CascadeError, ValueError):
    """An argument is outside its admissible range."""


class ConfigurationError(CascadeError):
    """A component is used before it is set up (e.g. BN inference with no statistics)."""


class ContractError(CascadeError):
    """An operation is called in a state its contract forbids."""


class FormatError(CascadeError):
    """A file on disk is corrupt, truncated or of an unsupported version."""


class NonFiniteError(CascadeError, FloatingPointError):
    """NaN or Inf met where finite values are required."""


class TrainingDivergence(CascadeError):
    """The training loss became non-finite.

    ``iteration`` is the index of the offending step and ``trace`` the loss
    trace recorded up to that point.
    """

    def __init__(self, iteration, trace=None):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace or []
