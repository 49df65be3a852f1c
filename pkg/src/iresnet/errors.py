"""Exception types shared across the package.

The CLI maps each class onto a process exit code.
"""


class IResNetError(Exception):
    exit_code = 1


class ConfigError(IResNetError):
    """Bad configuration or wiring: wrong channel counts, bad sizes, unknown keys."""

    exit_code = 1


class FormatError(IResNetError):
    """Unreadable or malformed data file (PFM, PNG, checkpoint, index)."""

    exit_code = 2


class NumericalError(IResNetError):
    """NaN or Inf produced during a forward pass or loss evaluation."""

    exit_code = 3
