import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ocpec.core.data_models import ContinuationRecord, GapParams, SgclConfig
from ocpec.core.errors import SolverAbort
from ocpec.model.ocpec_model import (
    DiscretizedNlp,
    OcpecProblem,
    Trajectory,
    discretize,
    eval_cost,
    stage_natural_residuals,
    trajectory_from_z,
)
from ocpec.solvers.sgcl import SgclResult, SgclSolver, Termination, update_relaxation
from ocpec.tools.gap_function import GapEvaluator

logger = logging.getLogger(__name__)


def relaxation_schedule(config: SgclConfig) -> List[float]:
    """s^0 > s^1 > ... > s^J produced by repeated update_relaxation."""
    schedule = [config.s0]
    s = config.s0
    while s > config.s_final:
        s = update_relaxation(s, config)
        schedule.append(s)
    return schedule


@dataclass
class ContinuationResult:
    nlp: DiscretizedNlp
    z: np.ndarray
    gamma_h: np.ndarray
    gamma_c: np.ndarray
    records: List[ContinuationRecord] = field(default_factory=list)
    results: List[SgclResult] = field(default_factory=list)

    @property
    def final(self) -> SgclResult:
        return self.results[-1]

    @property
    def termination(self) -> Termination:
        return self.final.stats.termination

    @property
    def trajectory(self) -> Trajectory:
        return trajectory_from_z(self.nlp, self.z)


def max_natural_residual(problem: OcpecProblem, traj: Trajectory) -> float:
    return float(np.abs(stage_natural_residuals(problem, traj)).max(initial=0.0))


def continuation_solve(
    problem: OcpecProblem,
    N: int,
    config: SgclConfig,
    gap_params: Optional[GapParams] = None,
    z0: Optional[np.ndarray] = None,
    schedule: Optional[List[float]] = None,
) -> ContinuationResult:
    """Solve the relaxed problems along the s-schedule, warm-starting primal and duals.

    Each s gets a fresh filter; the projector warm-start cache is shared by all of them.
    A SolverAbort raised at some s is re-raised with that s and the records so far.
    """
    gap_params = gap_params or GapParams.identity(problem.n_lambda)
    schedule = schedule or relaxation_schedule(config)
    nlp = discretize(problem, N, schedule[0], config.mu, gap_params, config.hessian_regularization)
    evaluator = GapEvaluator(
        gap_params,
        problem.vi_set,
        projector_path=config.projector_path,
        parallel=config.parallel_projection,
        workers=config.projection_workers,
    )
    z = np.ones(nlp.n_primal) if z0 is None else np.asarray(z0, dtype=float).copy()
    gamma_h, gamma_c = None, None
    out: Optional[ContinuationResult] = None
    records: List[ContinuationRecord] = []
    results: List[SgclResult] = []

    for j, s in enumerate(schedule):
        nlp_s = nlp.with_relaxation(s)
        try:
            res = SgclSolver(nlp_s, config, evaluator).run(z, gamma_h, gamma_c)
        except SolverAbort as exc:
            exc.relaxation = s
            exc.records = records
            logger.error(f"continuation aborted at s={s:.3e} (step {j}): {exc}")
            raise
        z, gamma_h, gamma_c = res.z, res.gamma_h, res.gamma_c
        traj = trajectory_from_z(nlp_s, z)
        record = ContinuationRecord(
            s=s,
            cost=eval_cost(nlp_s, z)[0],
            max_natural_residual=max_natural_residual(problem, traj),
            iterations=res.stats.iterations,
            termination=res.stats.termination.value,
            timings=res.stats.timings,
        )
        records.append(record)
        results.append(res)
        logger.info(
            f"s={s:.3e}: {record.termination} after {record.iterations} iterations, "
            f"cost={record.cost:.6e}, max|Phi|={record.max_natural_residual:.3e}"
        )
        if res.stats.termination is Termination.MAX_ITER:
            logger.warning(f"s={s:.3e} ended without convergence, continuing from the last iterate")
        out = ContinuationResult(nlp_s, z, gamma_h, gamma_c, records, results)
    return out
