"""Exception hierarchy. Each class maps to one CLI exit code."""


class CombiError(Exception):
    exit_code = 1


class ValidationError(CombiError, ValueError):
    """Bad parameters, malformed files, or inputs outside a family."""

    exit_code = 2


class MembershipError(ValidationError):
    """A structure does not belong to the space it was paired with."""


class NoClosedFormError(ValidationError):
    """The requested statistic has no closed form for this family."""


class SpaceTooLargeError(ValidationError):
    """Enumeration was asked for more structures than the limit allows."""


class NumericalError(CombiError, ArithmeticError):
    """Non-finite values, divergence, or a degenerate linear system."""

    exit_code = 3


class BudgetExceededError(CombiError, RuntimeError):
    """A randomized routine ran past its step or time budget."""

    exit_code = 4
