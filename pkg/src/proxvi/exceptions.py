"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid or incompatible settings, raised before any compute happens."""


class DivergenceError(FloatingPointError):
    """An optimizer produced a non-finite or runaway iterate."""


class IDXFormatError(ValueError):
    """Malformed IDX file (bad magic number or truncated payload)."""
