class ConfigError(ValueError):
    """Invalid shapes, layer settings or run configuration."""


class DataError(ValueError):
    """Malformed input data: labels out of range, bad file contents."""
