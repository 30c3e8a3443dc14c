from typing import Optional


class OcpecError(RuntimeError):
    """Base class for every failure raised by the solver stack."""


class ModelError(OcpecError):
    """Problem data is inconsistent (dimensions, declared structure)."""


class OracleError(OcpecError):
    """The brute-force VI oracle was called outside its domain."""


class StaleGapEvaluationError(OcpecError):
    """Gap evaluations do not belong to the (lambda, eta) stored in z."""

    def __init__(self, stage: int):
        super().__init__(f"Gap evaluation for stage {stage} does not match the current (lambda, eta)")
        self.stage = stage


class ProjectionError(OcpecError):
    def __init__(self, message: str, stage: Optional[int] = None):
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)
        self.stage = stage


class SolverAbort(OcpecError):
    """SGCL stopped before a termination condition held.

    `stats` carries whatever was measured up to the failure, `relaxation`
    the value of s being solved when it happened and `records` the per-s
    results completed before it.
    """

    def __init__(self, message: str, stats=None, relaxation: Optional[float] = None):
        super().__init__(message)
        self.stats = stats
        self.relaxation = relaxation
        self.records: list = []

    def __str__(self) -> str:
        base = super().__str__()
        if self.relaxation is not None:
            return f"{base} (s={self.relaxation:.3e})"
        return base


class QpInfeasibleError(SolverAbort):
    pass


class LineSearchFailure(SolverAbort):
    pass
