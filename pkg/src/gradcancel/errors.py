"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration (unknown prompt, bad config file)."""


class InputError(ValueError):
    """Raised when an operation receives data that violates its preconditions."""
