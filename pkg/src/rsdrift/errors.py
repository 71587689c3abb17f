"""Exception hierarchy shared by every module."""


class RsDriftError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(RsDriftError, ValueError):
    """Argument has the wrong shape, range or value."""


class ConfigError(InvalidArgumentError):
    """A model configuration violates one of its invariants.

    ``key`` names the offending configuration key when one can be identified;
    ``problems`` lists every ``(key, message)`` violation found.
    """

    def __init__(self, message, key=None, problems=None):
        super().__init__(message)
        self.key = key
        self.problems = list(problems) if problems is not None else [(key, str(message))]


class RankError(InvalidArgumentError):
    """A matrix expected to have full row rank does not."""


class RangeError(InvalidArgumentError):
    """A requested time lies outside the available range."""


class NumericError(RsDriftError, ArithmeticError):
    """Non-finite values appeared in a computation."""


class SingularMatrixError(NumericError):
    """A matrix that must be positive definite is not (numerically)."""


class IntegrationError(NumericError):
    """The ODE integrator lost positive definiteness of ``s``."""

    def __init__(self, message, tau=None):
        super().__init__(message)
        self.tau = tau


class NonConvergenceError(RsDriftError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
