"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError / CompatibilityError -> 3, NumericAbortError -> 4.
"""


class GlembedError(Exception):
    """Base class for all package errors."""


class ConfigError(GlembedError):
    """Invalid configuration: unknown keys, bad values, impossible splits."""


class DataError(GlembedError):
    """Malformed or inconsistent input data."""


class CompatibilityError(GlembedError):
    """Model file and data disagree on shape, family, or vocabulary."""


class DomainError(GlembedError):
    """Value outside the support or parameter domain of a family."""


class RateDomainError(DomainError):
    """Nonpositive rate handed to a log-link family."""


class DegenerateContextError(GlembedError):
    """Empty context where the link requires at least one member."""


class NumericAbortError(GlembedError):
    """Training produced a non-finite parameter; names iteration and coordinate."""
