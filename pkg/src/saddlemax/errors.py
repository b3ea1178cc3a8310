"""Exception types raised by the library."""


class SaddlemaxError(Exception):
    """Base class for all library errors."""


class DomainError(SaddlemaxError, ValueError):
    """A dual point or parameter lies outside the model's open domain."""


class NotSupported(SaddlemaxError):
    """The requested capability is not available for this model or setting."""


class NoSaddlepoint(SaddlemaxError):
    """The saddlepoint equation could not be solved to tolerance."""


class SingularHessian(SaddlemaxError, ArithmeticError):
    """K0'' is numerically singular at the saddlepoint."""


class QuadratureNonpositive(SaddlemaxError, ArithmeticError):
    """The inversion quadrature produced a nonpositive P-factor."""


class TailNotDecayed(SaddlemaxError, ArithmeticError):
    """The inversion integrand has not decayed at the truncation boundary."""


class NotConverged(SaddlemaxError):
    """An iterative maximisation stopped before meeting its tolerance.

    The partial result is attached as ``fit`` when available.
    """

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class RankDeficient(SaddlemaxError, ArithmeticError):
    """A matrix required to have full column rank does not."""


class GridUnderflow(SaddlemaxError, ArithmeticError):
    """Every grid log-likelihood value is -inf."""
