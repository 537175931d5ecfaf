"""Exception types mapped to CLI exit codes."""


class StptError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 1


class ConfigError(StptError):
    """Invalid configuration: bad shapes, unknown keys, incompatible settings."""

    exit_code = 2


class InputError(StptError):
    """Unreadable or malformed input data (tensor files, JSON lines)."""

    exit_code = 3


class NumericError(StptError):
    """Numeric failure: non-finite values or a failed gradient check."""

    exit_code = 4
