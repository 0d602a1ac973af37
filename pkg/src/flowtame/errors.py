"""Exception types shared across the package."""


class FlowTameError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FlowTameError):
    """Operand shapes are incompatible."""


class DomainError(FlowTameError):
    """Input lies outside an operation's mathematical domain."""


class EmptyInputError(FlowTameError):
    """A reduction or loss was asked to operate on an empty input."""


class NonScalarOutputError(FlowTameError):
    """backward() requires a scalar output node."""


class NonFiniteError(FlowTameError):
    """A value that must be finite contains NaN or Inf."""


class ConfigError(FlowTameError):
    """Invalid configuration value."""


class InvalidCountError(FlowTameError):
    """A count argument must be positive."""


class NonFiniteLossError(FlowTameError):
    """Training loss diverged; carries the last good parameter snapshot."""

    def __init__(self, message, last_good=None, iteration=None):
        super().__init__(message)
        self.last_good = last_good
        self.iteration = iteration


class NonFiniteGradError(FlowTameError):
    """An optimizer step received non-finite gradients."""


class InsufficientDataError(FlowTameError):
    """Too few points for the requested statistic."""


class DegenerateStatsError(FlowTameError):
    """A standard deviation fell at or below its floor."""


class MaxIterationsExceeded(FlowTameError):
    """Taming hit its iteration budget before the stopping criterion.

    The partial result (model, trace, ...) is attached as ``.result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class EmptySplitError(FlowTameError):
    """A split selector resolved to an empty set."""


class OverlapError(FlowTameError):
    """Forget and remember sets overlap."""


class SchemaVersionError(FlowTameError):
    """Unsupported file schema version."""


class CorruptFileError(FlowTameError):
    """File failed its checksum or structural validation."""


class IoError(FlowTameError):
    """Filesystem-level failure while writing an artifact."""
