"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so every failure the user can trigger
should surface as one of them.
"""


class HintError(Exception):
    """Base class for all package errors."""


class DimensionError(HintError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(HintError, ValueError):
    """A configuration value violates an invariant."""


class UsageError(HintError):
    """An API was called in a way its contract forbids."""


class InputError(HintError, ValueError):
    """Input data does not satisfy the model's requirements."""


class NumericError(HintError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class TrainingError(NumericError):
    """Optimisation hit a non-finite gradient or loss."""


class ParseError(HintError, ValueError):
    """A file could not be decoded. Carries the byte offset of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FormatError(HintError, ValueError):
    """File format is recognised as unsupported."""


class CheckpointVersionError(HintError, ValueError):
    """Checkpoint or config was written by an incompatible format version."""


class InternalError(HintError, RuntimeError):
    """An internal invariant was breached."""
