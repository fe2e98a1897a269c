"""Exception hierarchy.

The CLI maps the three top-level families onto distinct exit codes.
"""


class PattError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PattError):
    """Bad roles, dimensions, or option values."""


class DataError(PattError):
    """Input data cannot be parsed or violates a dataset invariant."""


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class TrimmingError(DataError):
    pass


class NumericalError(PattError):
    """A fit or estimator failed numerically."""


class SingularFitError(NumericalError):
    def __init__(self, message, l=None):
        super().__init__(message)
        self.l = l


class NonConvergenceError(NumericalError):
    def __init__(self, message, coefficients=None, iterations=None):
        super().__init__(message)
        self.coefficients = coefficients
        self.iterations = iterations


class DegenerateLeverageError(NumericalError):
    pass


class DegenerateWeightsError(NumericalError):
    pass
