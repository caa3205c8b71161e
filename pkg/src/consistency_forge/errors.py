"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class ForgeError(Exception):
    """Base class for all package errors."""


class ConfigError(ForgeError):
    """Invalid or inconsistent configuration."""


class DataError(ForgeError):
    """Missing, malformed, or contract-violating data."""


class NumericError(ForgeError):
    """Numerical failure: divergence, NaN loss, non-convergence."""
