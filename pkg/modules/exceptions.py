class CaptrlError(Exception):
    """Base exception for errors that should be displayed to the user."""

    exit_code: int = 1


class ConfigError(CaptrlError):
    """Raised when the run configuration is invalid."""

    exit_code = 2


class DataError(CaptrlError):
    """Raised when a dataset, feature file or caption file cannot be used."""

    exit_code = 3


class NumericError(CaptrlError):
    """Raised when a NaN or Inf shows up in a loss, gradient or reward."""

    exit_code = 4


class ShapeError(CaptrlError, ValueError):
    """Raised when operand shapes do not conform for an op."""


class TokenRangeError(CaptrlError, IndexError):
    """Raised when a token id falls outside the vocabulary."""


class CheckpointError(DataError):
    """Raised for malformed checkpoint files or parameter/config mismatches."""


class RewardError(CaptrlError):
    """Raised when the reward function fails during an RL step."""
