"""Exception types shared across the package."""


class CocoonError(Exception):
    """Base class for all package errors."""


class DimensionError(CocoonError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(CocoonError, ArithmeticError):
    """A forward operation produced NaN or Inf."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite output from '{op}'")


class DegenerateInputError(CocoonError, ValueError):
    """Input is outside the domain where an operation is defined (e.g. a zero vector)."""


class ContractError(CocoonError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(CocoonError, ValueError):
    """Configuration failed validation."""


class CheckpointError(CocoonError, IOError):
    """A checkpoint or data container could not be read, or does not match."""


class UndefinedMetricError(CocoonError, ValueError):
    """A metric is undefined for the given input."""


class HashMismatchError(CheckpointError):
    """An artifact was produced under a different configuration."""
