"""Exception types shared across the package."""


class DarcError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(DarcError):
    """A file does not conform to the expected binary layout."""


class LengthError(FormatError):
    """A file's payload is shorter or longer than its header declares."""


class ValidationError(DarcError):
    """Data violates an invariant (bad labels, non-finite values, shape mismatch)."""


class ConfigError(DarcError):
    """A configuration value is out of range or inconsistent with the data."""
