"""Exception hierarchy.

Two families map onto the CLI exit codes: ``ValidationError`` (bad input,
exit 2) and ``NumericalDomainError`` (a formula or estimator evaluated
outside its domain, exit 3).
"""


class ChandetectError(Exception):
    pass


class ValidationError(ChandetectError, ValueError):
    pass


class NumericalDomainError(ChandetectError, ArithmeticError):
    pass


class InvalidShapeError(ValidationError):
    """Prior shape does not integrate to one or violates its sup bound."""


class InvalidWeightsError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DomainError(NumericalDomainError):
    pass


class DivergentTailError(NumericalDomainError):
    """No finite truncation index satisfies the tail tolerance."""


class EntropyDivergenceError(NumericalDomainError):
    pass


class UnstableQuantileError(NumericalDomainError):
    """Too few samples beyond the requested quantile."""


class InsufficientTailError(NumericalDomainError):
    pass


class InsideBulkError(NumericalDomainError):
    """Channel weight too large for a positive boundary amplitude."""
