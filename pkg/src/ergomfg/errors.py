class ModelError(ValueError):
    """Invalid model data: bad dimensions, non-stochastic rows, negative costs."""


class NonUniqueInvariant(RuntimeError):
    """The chain induced by a control has more than one recurrent class."""

    def __init__(self, msg, classes=None):
        super().__init__(msg)
        self.classes = classes or []


class IterationError(RuntimeError):
    """An iterative solver exhausted its iteration budget."""


class MinorizationTooTight(ValueError):
    """The split-chain residual kernel has a negative entry."""


class BudgetError(RuntimeError):
    """An exhaustive computation would exceed its configured budget."""


class BackendModeError(ValueError):
    """A cost backend was requested for a cost kind it cannot handle."""
