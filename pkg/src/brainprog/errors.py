"""Exception types mapped to CLI exit codes."""


class ConfigError(Exception):
    """Invalid or unknown configuration keys (exit code 3)."""


class NumericError(Exception):
    """Numeric failure: divergence, NaN loss, ill-posed fit (exit code 5)."""
