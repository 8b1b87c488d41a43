"""Exception hierarchy shared by all modules."""


class QacqError(Exception):
    """Base class for every error raised by this package."""


class InputError(QacqError, ValueError):
    """Malformed array shapes, out-of-bounds inputs and the like."""


class ConfigError(QacqError, ValueError):
    """Invalid parameter or configuration value."""


class NumericalError(QacqError, ArithmeticError):
    """A linear-algebra routine broke down."""


class NotPositiveDefiniteError(NumericalError):
    """Cholesky failed even at the largest permitted jitter."""


class DegenerateQueryError(NumericalError):
    """Two rows of a query set coincide, so sample paths are not differentiable."""


class FitError(QacqError, RuntimeError):
    """Every hyperparameter restart failed.

    ``diagnostics`` holds one message per failed restart.
    """

    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)
