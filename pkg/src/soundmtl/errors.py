"""Exception hierarchy shared by every module.

Each class carries the process exit code the command-line driver maps it to.
"""


class SoundMTLError(Exception):
    exit_code = 1


class UsageError(SoundMTLError):
    """Wrong call sequence or an argument combination that makes no sense."""

    exit_code = 2


class ConfigurationError(UsageError):
    exit_code = 2


class DimensionError(SoundMTLError, ValueError):
    exit_code = 3


class ValidationError(SoundMTLError, ValueError):
    exit_code = 3


class DataError(SoundMTLError):
    """Malformed or insufficient input data (short clips, bad archives, ...)."""

    exit_code = 3


class NumericalError(SoundMTLError, FloatingPointError):
    """A NaN/Inf appeared, or a gradient check failed."""

    exit_code = 4
