"""Successive gap constraint linearization (SGCL) for one relaxed problem.

Each iteration evaluates the stage-wise skewed projections, linearizes h and c
around z^k, solves the sparse QP for (dz, gamma_hat), tests termination at
(z^k, gamma_hat), runs the filter line search and moves the multipliers
gamma <- gamma + alpha (gamma_hat - gamma).

An inconsistent linearization is answered with an l1-elastic QP step, which is
never a stopping step and must lower the linearized violation.
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from ocpec.core.data_models import SgclConfig
from ocpec.core.errors import LineSearchFailure, QpInfeasibleError
from ocpec.model.ocpec_model import (
    DiscretizedNlp,
    eval_constraints,
    eval_cost,
    eval_jacobians,
    gauss_newton_hessian,
)
from ocpec.solvers.filter import Filter, backtrack
from ocpec.tools.gap_function import GapEvaluation, GapEvaluator
from ocpec.tools.qp_subsolver import QpStatus, SparseQp, solve_elastic_qp, solve_sparse_qp

logger = logging.getLogger(__name__)

TIMED_PHASES = ("omega", "derivatives", "qp", "line_search", "other")
ELASTIC_MIN_PROGRESS = 1e-4


class Termination(str, Enum):
    CONTINUE = "Continue"
    STOP_KKT = "StopKkt"
    STOP_STEP = "StopStep"
    STOP_SPLIT = "StopSplit"
    MAX_ITER = "MaxIter"

    @property
    def converged(self) -> bool:
        return self in (Termination.STOP_KKT, Termination.STOP_STEP, Termination.STOP_SPLIT)


@dataclass
class Residuals:
    E_p: float
    E_d: float
    E_c: float

    @property
    def composite(self) -> float:
        return max(self.E_p, self.E_d, self.E_c)


@dataclass
class SgclIterate:
    z: np.ndarray
    gamma_h: np.ndarray
    gamma_c: np.ndarray
    gap_evals: List[GapEvaluation]
    residuals: Optional[Residuals] = None
    iteration: int = 0


@dataclass
class IterationRecord:
    k: int
    J: float
    M: float
    E_p: float
    E_d: float
    E_c: float
    alpha: float
    step_norm: float


@dataclass
class SolveStats:
    s: float
    iterations: int = 0
    termination: Termination = Termination.CONTINUE
    residuals: Optional[Residuals] = None
    step_norm: float = np.inf
    timings: Dict[str, float] = field(default_factory=dict)
    records: List[IterationRecord] = field(default_factory=list)


@dataclass
class SgclResult:
    z: np.ndarray
    gamma_h: np.ndarray
    gamma_c: np.ndarray
    gap_evals: List[GapEvaluation]
    stats: SolveStats


class PhaseTimer:
    """Exclusive wall-clock time per phase; a nested phase pauses the enclosing one."""

    def __init__(self):
        self.totals: Dict[str, float] = dict.fromkeys(TIMED_PHASES, 0.0)
        self._stack: List[str] = []
        self._mark = 0.0
        self._start = time.perf_counter()

    @contextmanager
    def phase(self, name: str):
        now = time.perf_counter()
        if self._stack:
            self.totals[self._stack[-1]] += now - self._mark
        self._stack.append(name)
        self._mark = now
        try:
            yield
        finally:
            now = time.perf_counter()
            self.totals[self._stack.pop()] += now - self._mark
            self._mark = now

    def summary(self) -> Dict[str, float]:
        """Per-phase totals plus the wall clock since construction under "total"."""
        timed = dict(self.totals)
        timed["total"] = time.perf_counter() - self._start
        return timed


def scaling_factors(gamma_h: np.ndarray, gamma_c: np.ndarray, s_max: float) -> Tuple[float, float]:
    n_h, n_c = gamma_h.size, gamma_c.size
    total = n_h + n_c
    avg_all = (np.abs(gamma_h).sum() + np.abs(gamma_c).sum()) / total if total else 0.0
    avg_c = np.abs(gamma_c).sum() / n_c if n_c else 0.0
    return max(s_max, avg_all) / s_max, max(s_max, avg_c) / s_max


def optimality_errors(
    h: np.ndarray,
    c: np.ndarray,
    grad_J: np.ndarray,
    Jh: sp.spmatrix,
    Jc: sp.spmatrix,
    gamma_h: np.ndarray,
    gamma_c: np.ndarray,
    s_max: float = 100.0,
) -> Residuals:
    """(E_p, E_d, E_c) for the Lagrangian J + gamma_h^T h - gamma_c^T c."""
    kappa_d, kappa_c = scaling_factors(gamma_h, gamma_c, s_max)
    grad_L = grad_J + Jh.T @ gamma_h - Jc.T @ gamma_c
    E_p = max(np.abs(h).max(initial=0.0), np.abs(np.minimum(c, 0.0)).max(initial=0.0))
    E_d = max(np.abs(grad_L).max(initial=0.0), np.abs(np.minimum(gamma_c, 0.0)).max(initial=0.0)) / kappa_d
    E_c = np.abs(c * gamma_c).max(initial=0.0) / kappa_c
    return Residuals(float(E_p), float(E_d), float(E_c))


def check_termination(residuals: Residuals, dz: np.ndarray, config: SgclConfig) -> Termination:
    if residuals.composite <= config.eps_kkt:
        return Termination.STOP_KKT
    if np.abs(dz).max(initial=0.0) <= config.eps_sd:
        return Termination.STOP_STEP
    if residuals.E_p <= config.eps_p and residuals.E_d <= config.eps_d and residuals.E_c <= config.eps_c:
        return Termination.STOP_SPLIT
    return Termination.CONTINUE


def violation_from_residuals(nlp: DiscretizedNlp, h: np.ndarray, c: np.ndarray) -> float:
    return float(nlp.dt * (np.abs(h).sum() + np.abs(np.minimum(c, 0.0)).sum()))


def constraint_violation(
    nlp: DiscretizedNlp,
    z: np.ndarray,
    s: Optional[float] = None,
    gap_evals: Optional[Sequence[GapEvaluation]] = None,
) -> float:
    """M(z, s) = dt (|h|_1 + |min(0, c)|_1)."""
    if s is not None and s != nlp.s:
        nlp = nlp.with_relaxation(s)
    if gap_evals is None:
        lam, eta = nlp.stage_gap_inputs(z)
        gap_evals = GapEvaluator(nlp.gap_params, nlp.problem.vi_set).evaluate(lam, eta)
    h, c = eval_constraints(nlp, z, gap_evals)
    return violation_from_residuals(nlp, h, c)


def evaluate_residuals(
    nlp: DiscretizedNlp,
    z: np.ndarray,
    gamma_h: np.ndarray,
    gamma_c: np.ndarray,
    s_max: float = 100.0,
    evaluator: Optional[GapEvaluator] = None,
) -> Residuals:
    """Optimality errors recomputed from scratch at (z, gamma)."""
    evaluator = evaluator or GapEvaluator(nlp.gap_params, nlp.problem.vi_set)
    evals = evaluator.evaluate(*nlp.stage_gap_inputs(z))
    h, c = eval_constraints(nlp, z, evals)
    Jh, Jc = eval_jacobians(nlp, z, evals)
    _, grad_J = eval_cost(nlp, z)
    return optimality_errors(h, c, grad_J, Jh, Jc, gamma_h, gamma_c, s_max)


StepCallback = Callable[[SgclIterate, Filter, float], None]


class SgclSolver:
    """Runs SGCL on one relaxed NLP. Not shareable while `run` is active."""

    def __init__(self, nlp: DiscretizedNlp, config: SgclConfig, evaluator: Optional[GapEvaluator] = None):
        self.nlp = nlp
        self.config = config
        self.evaluator = evaluator or GapEvaluator(
            nlp.gap_params,
            nlp.problem.vi_set,
            projector_path=config.projector_path,
            parallel=config.parallel_projection,
            workers=config.projection_workers,
        )
        self.filter: Optional[Filter] = None

    def _evaluate_gaps(self, z: np.ndarray, timer: PhaseTimer) -> List[GapEvaluation]:
        with timer.phase("omega"):
            return self.evaluator.evaluate(*self.nlp.stage_gap_inputs(z))

    def run(
        self,
        z0: np.ndarray,
        gamma_h0: Optional[np.ndarray] = None,
        gamma_c0: Optional[np.ndarray] = None,
        callback: Optional[StepCallback] = None,
    ) -> SgclResult:
        nlp, config = self.nlp, self.config
        z0 = np.asarray(z0, dtype=float).reshape(-1)
        if z0.size != nlp.n_primal or not np.isfinite(z0).all():
            raise ValueError(f"z0 must be a finite vector of length {nlp.n_primal}")
        timer = PhaseTimer()
        stats = SolveStats(s=nlp.s)
        self.filter = None

        it = SgclIterate(
            z=z0.copy(),
            gamma_h=np.zeros(nlp.n_eq) if gamma_h0 is None else np.asarray(gamma_h0, dtype=float).copy(),
            gamma_c=np.zeros(nlp.n_in) if gamma_c0 is None else np.asarray(gamma_c0, dtype=float).copy(),
            gap_evals=self._evaluate_gaps(z0, timer),
        )
        with timer.phase("derivatives"):
            H = gauss_newton_hessian(nlp, it.z)

        def trial(z_trial: np.ndarray):
            evals = self._evaluate_gaps(z_trial, timer)
            h_t, c_t = eval_constraints(nlp, z_trial, evals)
            return violation_from_residuals(nlp, h_t, c_t), eval_cost(nlp, z_trial)[0], evals

        for k in range(1, config.k_max + 1):
            it.iteration = k
            with timer.phase("derivatives"):
                h, c = eval_constraints(nlp, it.z, it.gap_evals)
                Jh, Jc = eval_jacobians(nlp, it.z, it.gap_evals)
                J_k, grad_J = eval_cost(nlp, it.z)
                M_k = violation_from_residuals(nlp, h, c)
            if self.filter is None:
                self.filter = Filter.initial(M_k)

            with timer.phase("qp"):
                qp = SparseQp(H, grad_J, Jh, -h, Jc, c, nlp.primal_stage, nlp.eq_stage)
                sol = solve_sparse_qp(qp, tol=config.qp_tolerance, max_iter=config.qp_max_iter)
                elastic = sol.status is QpStatus.INFEASIBLE
                if elastic:
                    logger.info(f"s={nlp.s:.3e} k={k}: linearization inconsistent, taking an elastic step")
                    sol, slacks = solve_elastic_qp(
                        qp, config.elastic_penalty, tol=config.qp_tolerance, max_iter=config.qp_max_iter
                    )
            if sol.status is QpStatus.INFEASIBLE:
                stats.iterations, stats.timings = k, timer.summary()
                raise QpInfeasibleError(
                    f"QP linearization infeasible at iteration {k} (KKT residual {sol.kkt_residual:.3e})", stats=stats
                )
            if sol.status is QpStatus.MAX_ITER:
                logger.warning(f"iteration {k}: QP hit max_iter, using best iterate (residual {sol.kkt_residual:.3e})")

            dz = sol.primal
            with timer.phase("other"):
                step_norm = float(np.abs(dz).max(initial=0.0))
                it.residuals = optimality_errors(
                    h, c, grad_J, Jh, Jc, sol.eq_multipliers, sol.in_multipliers, config.s_max
                )
                if elastic:
                    # the linearized model of M must still decrease along dz
                    M_lin = violation_from_residuals(nlp, h + Jh @ dz, c + Jc @ dz)
                    logger.debug(
                        f"elastic step: M={M_k:.3e} -> linearized {M_lin:.3e}, slack sum {slacks.sum():.3e}"
                    )
                    verdict = Termination.CONTINUE
                else:
                    M_lin = M_k
                    verdict = check_termination(it.residuals, dz, config)
            if elastic and M_lin > (1.0 - ELASTIC_MIN_PROGRESS) * M_k:
                stats.iterations, stats.residuals, stats.timings = k, it.residuals, timer.summary()
                raise QpInfeasibleError(
                    f"elastic step at iteration {k} does not reduce the violation (M={M_k:.3e}, linearized {M_lin:.3e})",
                    stats=stats,
                )
            if verdict.converged:
                it.gamma_h, it.gamma_c = sol.eq_multipliers.copy(), sol.in_multipliers.copy()
                with timer.phase("other"):
                    stats.records.append(IterationRecord(k, J_k, M_k, *_triple(it.residuals), 0.0, step_norm))
                    logger.info(
                        f"s={nlp.s:.3e} k={k}: {verdict.value} (E={it.residuals.composite:.3e}, |dz|={step_norm:.3e})"
                    )
                return self._finish(it, stats, verdict, step_norm, timer)

            with timer.phase("line_search"):
                try:
                    ls = backtrack(it.z, dz, J_k, M_k, float(grad_J @ dz), trial, self.filter, config)
                except LineSearchFailure as exc:
                    stats.iterations, stats.residuals, stats.timings = k, it.residuals, timer.summary()
                    exc.stats = stats
                    raise

            with timer.phase("other"):
                it.z = ls.z
                it.gap_evals = ls.payload
                it.gamma_h = it.gamma_h + ls.alpha * (sol.eq_multipliers - it.gamma_h)
                it.gamma_c = it.gamma_c + ls.alpha * (sol.in_multipliers - it.gamma_c)
                stats.records.append(IterationRecord(k, J_k, M_k, *_triple(it.residuals), ls.alpha, step_norm))
                logger.info(
                    f"s={nlp.s:.3e} k={k} J={J_k:.6e} M={M_k:.3e} E_p={it.residuals.E_p:.3e} "
                    f"E_d={it.residuals.E_d:.3e} E_c={it.residuals.E_c:.3e} alpha={ls.alpha:.3e} |dz|={step_norm:.3e}"
                )
                if callback is not None:
                    callback(it, self.filter, ls.alpha)

        logger.warning(f"s={nlp.s:.3e}: no termination condition met within k_max={config.k_max}")
        return self._finish(it, stats, Termination.MAX_ITER, stats.step_norm, timer)

    def _finish(self, it: SgclIterate, stats: SolveStats, verdict: Termination, step_norm: float, timer: PhaseTimer):
        stats.iterations = it.iteration
        stats.termination = verdict
        stats.residuals = it.residuals
        stats.step_norm = step_norm
        stats.timings = timer.summary()
        return SgclResult(it.z, it.gamma_h, it.gamma_c, it.gap_evals, stats)


def _triple(res: Residuals) -> Tuple[float, float, float]:
    return res.E_p, res.E_d, res.E_c


def sgcl_solve(
    nlp: DiscretizedNlp,
    s: float,
    z0: np.ndarray,
    config: SgclConfig,
    gamma_h0: Optional[np.ndarray] = None,
    gamma_c0: Optional[np.ndarray] = None,
    evaluator: Optional[GapEvaluator] = None,
) -> SgclResult:
    return SgclSolver(nlp.with_relaxation(s), config, evaluator).run(z0, gamma_h0, gamma_c0)


def update_relaxation(s_j: float, config: SgclConfig) -> float:
    """s_{j+1} = max(s_final, min(kappa_t s_j, s_j^kappa_e))."""
    return max(config.s_final, min(config.kappa_t * s_j, s_j**config.kappa_e))
