"""Exception types shared across the package."""


class OffmarlError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(OffmarlError):
    """Invalid configuration: bad dimensions, out-of-range values, unknown keys."""


class DataFormatError(OffmarlError):
    """Corrupt, truncated or version-incompatible file."""


class DivergenceError(OffmarlError):
    """Training produced a non-finite loss or gradient."""
