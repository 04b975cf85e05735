"""Exception types mapped to CLI exit codes."""


class ConfigError(Exception):
    """Bad or missing configuration (exit code 2)."""

    exit_code = 2


class DataError(Exception):
    """Malformed or inconsistent input data (exit code 3)."""

    exit_code = 3


class NumericError(Exception):
    """Non-finite values detected during computation (exit code 4)."""

    exit_code = 4
