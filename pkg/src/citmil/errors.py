"""Exception hierarchy shared across the package."""


class CitError(Exception):
    """Base class for all package errors."""


class ContractError(CitError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class DomainError(CitError, ArithmeticError):
    """Input outside the numeric domain of an operation (NaN, Inf, <= 0, ...)."""


class ConfigError(CitError, ValueError):
    """Invalid configuration value."""


class FormatError(CitError, IOError):
    """On-disk data is malformed, truncated, or of an unknown version."""
