"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class ConfigError(ValueError):
    """Invalid configuration value or missing input."""


class FormatError(ValueError):
    """Malformed serialized payload or input file."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class EvaluationError(ArithmeticError):
    """A function evaluation produced a non-finite value."""


class ProtocolError(RuntimeError):
    """Federation messages are inconsistent with each other."""
