"""Exception types shared across the package."""


class MadlabError(Exception):
    """Base class for all package errors."""


class ShapeError(MadlabError, ValueError):
    """Array dimensions disagree with the declared layer or batch shapes."""


class ConfigError(MadlabError, ValueError):
    """Invalid or inconsistent configuration."""


class SchemaError(MadlabError, ValueError):
    """A data file does not conform to the documented schema."""


class StateError(MadlabError, RuntimeError):
    """Operation invoked in an invalid order (e.g. backward before forward)."""


class DomainError(MadlabError, ValueError):
    """Numeric input outside the mathematical domain of an operation."""


class NumericsError(MadlabError, ArithmeticError):
    """Non-finite values encountered where finite math is required."""
