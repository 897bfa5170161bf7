"""Exception types shared across the toolkit."""


class AdvensError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AdvensError, ValueError):
    """Operand shapes do not conform."""


class ContractError(AdvensError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(AdvensError, ArithmeticError):
    """A computation produced a non-finite value."""


class SimplexError(ContractError):
    """Ensemble weights are not a valid point of the probability simplex."""


class FormatError(AdvensError, ValueError):
    """A data file does not follow its binary layout."""


class ConfigError(AdvensError, ValueError):
    """An experiment config could not be parsed or validated."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CorruptCheckpointError(AdvensError, ValueError):
    """Checkpoint bytes are truncated or fail checksum validation."""


class CheckpointVersionError(AdvensError, ValueError):
    """Checkpoint was written with an unsupported format version."""
