"""Solver-independent check of a trajectory: natural residual, dynamics, path constraints."""

import logging
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field

from ocpec.model.ocpec_model import OcpecProblem, Trajectory
from ocpec.tools.vi_core import natural_residual

logger = logging.getLogger(__name__)


class VerificationVerdict(BaseModel):
    tol: float
    max_natural_residual: float
    max_dynamics_residual: float
    max_path_violation: float
    stage_natural_residuals: List[float] = Field(default_factory=list)
    flagged_stages: List[int] = Field(default_factory=list)
    natural_residual_ok: bool
    dynamics_ok: bool
    path_ok: bool

    @property
    def passed(self) -> bool:
        return self.natural_residual_ok and self.dynamics_ok and self.path_ok


def verify_solution(
    problem: OcpecProblem, traj: Trajectory, tol: float, dynamics_tol: Optional[float] = None
) -> VerificationVerdict:
    """Recompute Phi_n, implicit-Euler defects and path violations from the raw trajectory."""
    N = traj.N
    if traj.x.shape != (N + 1, problem.n_x) or traj.lam.shape != (N, problem.n_lambda):
        raise ValueError(f"trajectory shapes {traj.x.shape}/{traj.lam.shape} do not match the problem")
    dynamics_tol = tol if dynamics_tol is None else dynamics_tol
    dt = np.diff(traj.t)

    phi_norms, dyn_norms, path_norms = [], [], []
    for n in range(N):
        x, u, lam = traj.x[n + 1], traj.u[n], traj.lam[n]
        phi_n = natural_residual(lam, problem.F(x, u, lam), problem.vi_set)
        phi_norms.append(float(np.abs(phi_n).max()))
        defect = traj.x[n] + problem.f(x, u, lam) * dt[n] - x
        dyn_norms.append(float(np.abs(defect).max()))
        violation = 0.0
        if problem.G is not None:
            violation = max(violation, float(np.abs(np.minimum(problem.G(x, u, lam), 0.0)).max(initial=0.0)))
        if problem.C is not None:
            violation = max(violation, float(np.abs(problem.C(x, u, lam)).max(initial=0.0)))
        path_norms.append(violation)

    verdict = VerificationVerdict(
        tol=tol,
        max_natural_residual=max(phi_norms, default=0.0),
        max_dynamics_residual=max(dyn_norms, default=0.0),
        max_path_violation=max(path_norms, default=0.0),
        stage_natural_residuals=phi_norms,
        flagged_stages=[n for n, r in enumerate(phi_norms) if r > tol],
        natural_residual_ok=max(phi_norms, default=0.0) <= tol,
        dynamics_ok=max(dyn_norms, default=0.0) <= dynamics_tol,
        path_ok=max(path_norms, default=0.0) <= dynamics_tol,
    )
    logger.info(
        f"verification: max|Phi|={verdict.max_natural_residual:.3e}, "
        f"dynamics={verdict.max_dynamics_residual:.3e}, path={verdict.max_path_violation:.3e} "
        f"-> {'pass' if verdict.passed else 'fail'}"
    )
    return verdict
