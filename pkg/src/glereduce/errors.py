"""Exception hierarchy shared by all modules."""


class GLEError(Exception):
    """Base class for errors raised by glereduce."""

    #: process exit code used by the command line driver
    exit_code = 1


class ValidationError(GLEError, ValueError):
    exit_code = 2


class NotPositiveSemidefinite(ValidationError):
    pass


class QuadratureError(GLEError):
    exit_code = 3


class SingularLyapunov(GLEError):
    exit_code = 3


class FitError(GLEError):
    exit_code = 4


class SingularMoment(FitError):
    """``Minf`` is singular, so the order-1 fit is undefined."""

    exit_code = 7


class SingularSystem(FitError):
    """The block moment system of an order >= 2 fit is singular."""

    exit_code = 8


class StabilityError(GLEError):
    exit_code = 5


class FdtInfeasible(GLEError):
    exit_code = 6
