"""Exception taxonomy shared across the package.

The CLI maps ConfigError to exit code 2 and NumericError to exit code 3;
everything else is a programming error and propagates.
"""


class HiStreamError(Exception):
    """Base class for all package errors."""


class ShapeError(HiStreamError, ValueError):
    """Tensor extents violate an operation's contract."""


class ConfigError(HiStreamError, ValueError):
    """Invalid configuration value, unknown mode, or unknown config key."""


class StateError(HiStreamError, RuntimeError):
    """Operation called in an invalid lifecycle state (e.g. cache misuse)."""


class ContractError(HiStreamError, ValueError):
    """Argument violates a documented precondition."""


class NumericError(HiStreamError, ArithmeticError):
    """NaN or divergence detected in the numeric pipeline."""


class TensorIOError(HiStreamError, IOError):
    """Malformed tensor file or unwritable path."""
