"""Exception types shared across the package."""


class GlatError(Exception):
    """Base class for errors raised by this package."""


class ContractError(GlatError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class InfeasibleAlignmentError(ContractError):
    """No CTC alignment of the requested output length can produce the target."""


class ConfigError(GlatError, ValueError):
    """An experiment configuration failed validation."""


class CheckpointError(GlatError, ValueError):
    """A checkpoint could not be read or is incompatible with the request."""
