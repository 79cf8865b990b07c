"""Exception types shared by the analysis modules."""


class QelabError(Exception):
    """Base class for all errors raised by qelab."""


class InvalidInputError(QelabError, ValueError):
    """Input violates a documented precondition."""


class DegenerateDataError(QelabError):
    """Data is well-formed but carries no usable signal for the requested analysis."""


class ConvergenceError(QelabError):
    """An iterative fit stopped without meeting its convergence criterion.

    The best parameters found so far are kept on ``best_params`` so callers can
    still inspect or reuse them.
    """

    def __init__(self, message, best_params=None, cost=None):
        super().__init__(message)
        self.best_params = best_params
        self.cost = cost
