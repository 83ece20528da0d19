"""Exception hierarchy shared by all econograph modules."""


class EconographError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(EconographError, ValueError):
    """Input data violates a structural invariant.

    ``invariant`` names the violated rule so callers (and the CLI error
    file) can report it without parsing the message.
    """

    def __init__(self, message, invariant=None):
        super().__init__(message)
        self.invariant = invariant


class ParseError(ValidationError):
    """A file could not be parsed; ``path`` and ``line`` locate the problem."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message, invariant="parse")
        self.path = path
        self.line = line


class ConstraintError(ValidationError):
    """A parameter lies outside its admissible set (e.g. off the simplex)."""


class NumericalError(EconographError, ArithmeticError):
    """An iterative routine broke down or failed to converge.

    ``last`` carries the final iterate (or any diagnostic payload).
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class ConvergenceError(NumericalError):
    """Iteration cap reached before the stopping rule was met."""


class StabilityViolation(NumericalError):
    """Network weights are too large for a unique equilibrium to exist."""

    def __init__(self, message, product):
        super().__init__(message, last=product)
        self.product = product


class EstimationError(NumericalError):
    """Parameter estimation failed irrecoverably."""


class CapabilityError(EconographError):
    """The requested computation is infeasible at this problem size."""
