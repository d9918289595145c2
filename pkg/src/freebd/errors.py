"""Exception hierarchy shared by all modules."""


class FreeBDError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(FreeBDError, ValueError):
    """Invalid problem data or parameters.

    ``field`` names the offending configuration entry when there is one.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)


class EvaluationError(FreeBDError, ArithmeticError):
    """A callback or expression produced a non-finite or out-of-domain value."""

    def __init__(self, message, point=None):
        self.point = point
        if point is not None:
            message = f"{message} at {point}"
        super().__init__(message)


class RangeError(FreeBDError, ValueError):
    """A requested radius or ball does not fit inside the computational domain."""


class CoercivityError(FreeBDError):
    """No coercivity radius could be certified."""
