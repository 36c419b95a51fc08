"""Exception hierarchy shared by every module."""


class GmmError(Exception):
    """Base class for all package errors."""


class EvaluationError(GmmError):
    """A moment evaluator returned non-finite output."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class SingularMatrixError(GmmError):
    """A matrix that must be inverted is singular or badly conditioned."""

    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


class SingularWeightError(SingularMatrixError):
    pass


class BreadSingularError(SingularMatrixError):
    pass


class NonConvergenceError(GmmError):
    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class ContractError(GmmError):
    """Inputs violate a documented precondition."""


class VarianceInvalidError(GmmError):
    pass


class BootstrapDegenerateError(GmmError):
    def __init__(self, message: str, failures: int = 0, draws: int = 0):
        super().__init__(message)
        self.failures = failures
        self.draws = draws


class QuantileUnavailableError(GmmError):
    pass


class PseudoTrueVerificationError(GmmError):
    pass
