"""Exception types raised across the package."""


class QosraError(Exception):
    """Base class; carries a short machine-readable ``code``."""

    code = "error"

    def to_record(self) -> dict:
        return {"error": self.code, "message": str(self)}


class InvalidInputError(QosraError, ValueError):
    code = "invalid-input"


class ConvergenceError(QosraError):
    """SGD power iteration did not settle within ``max_iters``."""

    code = "convergence-failure"

    def __init__(self, message: str, residual: float = float("nan"), user_index: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.user_index = user_index


class InfeasibleError(QosraError):
    """The QoS target cannot be met below the power cap."""

    code = "infeasible"


class DivergenceError(QosraError):
    """Non-finite gradient or loss during training."""

    code = "training-divergence"


class InvalidPlanError(QosraError, ValueError):
    code = "invalid-plan"


class MissingSourceError(QosraError, KeyError):
    code = "missing-source"

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class DigestMismatchError(QosraError):
    code = "digest-mismatch"


class OracleBudgetError(QosraError):
    code = "oracle-budget-exceeded"
