"""Exception hierarchy shared by every qreforge module."""


class QreError(Exception):
    """Base class for all library errors."""


class GameError(QreError, ValueError):
    """Malformed game description."""


class DimensionMismatch(GameError):
    pass


class BrokenFlowStructure(GameError):
    pass


class CyclicTreeplex(GameError):
    pass


class NegativeProbability(GameError):
    pass


class NonPositivePlan(GameError):
    pass


# the normal-form solver speaks of strategies, the sequence solver of plans
NonPositiveStrategy = NonPositivePlan


class TooLarge(GameError):
    pass


class ShapeMismatch(QreError, ValueError):
    pass


class DegenerateDeck(QreError, ValueError):
    pass


class UnsupportedStages(QreError, ValueError):
    pass


class SolverError(QreError, ArithmeticError):
    """Numerical failure inside a solver."""


class MaxItersExceeded(SolverError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NumericalBreakdown(SolverError):
    pass


class SingularSystem(SolverError):
    pass


class SolverFailure(SolverError):
    """A solver error raised while training, tagged with the batch index."""

    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


class DivergenceDetected(QreError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
