"""Error taxonomy shared by the whole package.

Each class carries the process exit code the CLI maps it to, so library code
can raise precisely and the CLI stays a thin dispatcher.
"""


class CedgError(Exception):
    exit_code = 1


class ConfigError(CedgError):
    """Bad configuration: flags, presets, schedules, unknown variants."""

    exit_code = 2


class ShapeError(CedgError):
    """Tensor or architecture shape mismatch. Messages name the offending dims."""

    exit_code = 2


class DataError(CedgError):
    """Missing, corrupt, or inconsistent input data."""

    exit_code = 3


class NumericError(CedgError):
    """NaN or Inf encountered where finite values are required."""

    exit_code = 4
