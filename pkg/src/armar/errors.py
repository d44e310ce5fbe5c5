"""Failure taxonomy shared across the package (maps onto CLI exit codes)."""


class ArmarError(Exception):
    pass


class ConfigError(ArmarError):
    """Bad invocation or configuration (exit code 1)."""


class DataError(ArmarError):
    """Missing or inconsistent data on disk (exit code 2)."""


class NumericError(ArmarError):
    """Non-finite values or numerically impossible requests (exit code 3)."""
