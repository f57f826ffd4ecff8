class ConfigError(ValueError):
    """Invalid experiment or generator configuration."""


class UsageError(RuntimeError):
    """API used out of order, e.g. a look-ahead paired with the wrong parameters."""
