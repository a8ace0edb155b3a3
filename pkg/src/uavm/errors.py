"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1,
data problems exit 2 and numeric failures exit 3.
"""


class UAVMError(Exception):
    """Base class for all package errors."""


class ConfigError(UAVMError, ValueError):
    """Invalid configuration value."""


class ShapeError(UAVMError, ValueError):
    """Tensor or feature shapes do not agree."""


class NumericInputError(UAVMError, ValueError):
    """Non-finite values where finite ones are required."""


class NumericError(UAVMError, FloatingPointError):
    """Training produced a non-finite loss."""


class DataError(UAVMError, ValueError):
    """Dataset content is unusable (empty, unpaired, too small)."""


class FormatError(DataError):
    """A binary file could not be parsed."""

    def __init__(self, message, offset=None, sample_id=None):
        parts = [message]
        if sample_id is not None:
            parts.append(f"sample_id={sample_id!r}")
        if offset is not None:
            parts.append(f"byte offset {offset}")
        super().__init__(" ".join([parts[0]] + ([f"({', '.join(parts[1:])})"] if parts[1:] else [])))
        self.offset = offset
        self.sample_id = sample_id


class TapeError(UAVMError, RuntimeError):
    """Backward called on a graph that was already consumed."""
