"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the operation's documented domain."""


class ConfigurationError(ValueError):
    """Inputs are inconsistent with the configured component (shape, label set, ...)."""


class DegenerateInputError(DomainError):
    """Input is technically valid but degenerate (e.g. an all-zero attention map)."""


class NumericError(ArithmeticError):
    """A numeric precondition failed beyond tolerance (e.g. a covariance far from PSD)."""
