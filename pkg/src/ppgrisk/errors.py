"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Input data violates a contract (shape, layout, missing artifact)."""


class NumericError(RuntimeError):
    """Non-finite values or numerically impossible request."""
