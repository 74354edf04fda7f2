"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or precondition violation."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (factorization, eigensolve, degenerate variance)."""


class DegenerateError(NumericalError):
    """A statistic is undefined because its normalizer vanishes."""


class QuadratureWarning(RuntimeWarning):
    """Gauss-Hermite quadrature did not meet the order-doubling convergence check."""
