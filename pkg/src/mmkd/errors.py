"""Exception types shared across the package.

The CLI maps these onto process exit codes.
"""


class MMKDError(Exception):
    exit_code = 1


class ConfigError(MMKDError, ValueError):
    """Shapes, dimensions or settings that do not fit together."""

    exit_code = 2


class TrainingError(MMKDError, RuntimeError):
    """Non-finite losses or gradients during training."""

    exit_code = 3


class DataFormatError(MMKDError, ValueError):
    exit_code = 2


class BufferNotReady(MMKDError):
    """Raised when the hard buffer cannot serve a draw yet (outer update is skipped)."""
