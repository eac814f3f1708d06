"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, dimensions, or arguments."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""
