"""Exception hierarchy shared by every module."""


class SoundAlignError(Exception):
    """Base class for all package errors."""


class ShapeError(SoundAlignError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(SoundAlignError, ArithmeticError):
    """NaN or otherwise non-finite values where finite ones are required."""


class ContractError(SoundAlignError, ValueError):
    """A precondition of an operation was violated."""


class InputError(SoundAlignError, ValueError):
    """Malformed user input (audio, captions, empty sets)."""


class ParameterError(SoundAlignError, ValueError):
    """An out-of-range transform or optimizer parameter."""


class CapacityError(SoundAlignError, ValueError):
    """A request exceeds a fixed model capacity (e.g. query count)."""


class ConfigurationError(SoundAlignError, ValueError):
    """Invalid or incomplete configuration."""


class FormatError(SoundAlignError, ValueError):
    """A binary file is corrupt, truncated, or of the wrong kind."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionError(FormatError):
    """Stored dimensions disagree with the active configuration."""
