import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np

from ocpec.bench import reporting
from ocpec.bench.affine_dvi import build_affine_dvi, initial_guess
from ocpec.core.data_models import BenchmarkSpec, ContinuationRecord
from ocpec.core.errors import SolverAbort
from ocpec.core.workflow import continuation_solve, max_natural_residual
from ocpec.model.ocpec_model import discretize, eval_cost, trajectory_from_z
from ocpec.solvers.sgcl import IterationRecord, SgclSolver
from ocpec.tools.gap_function import evaluate_gap
from ocpec.tools.vi_core import natural_residual

logger = logging.getLogger(__name__)

RunMode = Literal["single_s", "continuation", "sweep", "random_starts"]


@dataclass
class CaseOutcome:
    """Result of one independent solve; picklable so it can come back from a worker process."""

    label: str
    records: List[ContinuationRecord] = field(default_factory=list)
    iterations: List[Tuple[float, List[IterationRecord]]] = field(default_factory=list)
    z: Optional[np.ndarray] = None
    s_final: float = 0.0
    converged: bool = False
    error: Optional[str] = None


@dataclass
class RunReport:
    mode: str
    outcomes: List[CaseOutcome]
    output_dir: Path
    artifacts: List[Path] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return bool(self.outcomes) and all(o.converged and o.error is None for o in self.outcomes)

    @property
    def records(self) -> List[Tuple[str, ContinuationRecord]]:
        return [(o.label, r) for o in self.outcomes for r in o.records]


def _solve_single(spec: BenchmarkSpec, label: str) -> CaseOutcome:
    problem = build_affine_dvi(spec)
    config = spec.solver
    nlp = discretize(problem, spec.N, spec.s_single, config.mu, spec.gap.to_params(1), config.hessian_regularization)
    outcome = CaseOutcome(label=label, s_final=spec.s_single)
    try:
        res = SgclSolver(nlp, config).run(initial_guess(nlp, spec.z0_policy, spec.seed))
    except SolverAbort as exc:
        outcome.error = str(exc)
        if exc.stats is not None:
            outcome.iterations.append((spec.s_single, exc.stats.records))
        return outcome
    outcome.z = res.z
    outcome.iterations.append((spec.s_single, res.stats.records))
    outcome.records.append(
        ContinuationRecord(
            s=spec.s_single,
            cost=eval_cost(nlp, res.z)[0],
            max_natural_residual=max_natural_residual(problem, trajectory_from_z(nlp, res.z)),
            iterations=res.stats.iterations,
            termination=res.stats.termination.value,
            timings=res.stats.timings,
        )
    )
    outcome.converged = res.stats.termination.converged
    return outcome


def _solve_continuation(spec: BenchmarkSpec, label: str, seed: Optional[int] = None) -> CaseOutcome:
    problem = build_affine_dvi(spec)
    config = spec.solver
    outcome = CaseOutcome(label=label, s_final=config.s_final)
    probe = discretize(problem, spec.N, config.s0, config.mu, spec.gap.to_params(1), config.hessian_regularization)
    policy = "random" if seed is not None else spec.z0_policy
    z0 = initial_guess(probe, policy, spec.seed if seed is None else seed)
    try:
        result = continuation_solve(problem, spec.N, config, spec.gap.to_params(1), z0)
    except SolverAbort as exc:
        outcome.error = str(exc)
        outcome.records = list(exc.records)
        if exc.stats is not None:
            outcome.iterations.append((exc.relaxation, exc.stats.records))
        return outcome
    outcome.records = result.records
    outcome.iterations = [(r.stats.s, r.stats.records) for r in result.results]
    outcome.z = result.z
    outcome.converged = result.termination.converged
    return outcome


def _solve_case(spec: BenchmarkSpec, mode: RunMode, label: str, seed: Optional[int] = None) -> CaseOutcome:
    if mode == "single_s":
        return _solve_single(spec, label)
    return _solve_continuation(spec, label, seed)


def _cases(spec: BenchmarkSpec, mode: RunMode) -> List[Tuple[BenchmarkSpec, str, Optional[int]]]:
    if mode == "sweep":
        cases = []
        for s_final in spec.sweep_s_final:
            solver = spec.solver.model_copy(update={"s_final": s_final})
            cases.append((spec.model_copy(update={"solver": solver}), f"s_final={s_final!r}", None))
        return cases
    if mode == "random_starts":
        return [(spec, f"seed={spec.seed + i}", spec.seed + i) for i in range(spec.n_starts)]
    return [(spec, mode, None)]


def run(spec: BenchmarkSpec, mode: RunMode, output_dir: Path) -> RunReport:
    """Execute `mode` and write trajectory, iterations, report and timings CSVs to output_dir."""
    output_dir = Path(output_dir)
    cases = _cases(spec, mode)
    case_mode = "single_s" if mode == "single_s" else "continuation"
    if spec.workers > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            futures = [pool.submit(_solve_case, s, case_mode, label, seed) for s, label, seed in cases]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_solve_case(s, case_mode, label, seed) for s, label, seed in cases]

    report = RunReport(mode=mode, outcomes=outcomes, output_dir=output_dir)
    report.artifacts = write_artifacts(spec, report)
    for o in outcomes:
        if o.error:
            logger.error(f"{o.label}: {o.error}")
    logger.info(f"run '{mode}' finished: {'success' if report.success else 'failure'}")
    return report


def write_artifacts(spec: BenchmarkSpec, report: RunReport) -> List[Path]:
    out = report.output_dir
    iteration_rows, report_rows, timing_rows = [], [], []
    for o in report.outcomes:
        for s, records in o.iterations:
            iteration_rows += reporting.iteration_rows(o.label, s, records)
        for record in o.records:
            report_rows.append(reporting.report_row(o.label, record))
            timing_rows.append(reporting.timing_row(o.label, record))
    paths = [
        reporting.write_csv(out / "iterations.csv", reporting.ITERATION_COLUMNS, iteration_rows),
        reporting.write_csv(out / "report.csv", reporting.REPORT_COLUMNS, report_rows),
        reporting.write_csv(out / "timings.csv", reporting.TIMING_COLUMNS, timing_rows),
    ]
    last = next((o for o in reversed(report.outcomes) if o.z is not None), None)
    if last is not None:
        paths.append(_write_trajectory(spec, last, out / "trajectory.csv"))
    return paths


def _write_trajectory(spec: BenchmarkSpec, outcome: CaseOutcome, path: Path) -> Path:
    problem = build_affine_dvi(spec)
    gap_params = spec.gap.to_params(1)
    nlp = discretize(problem, spec.N, outcome.s_final, spec.solver.mu, gap_params)
    traj = trajectory_from_z(nlp, outcome.z)
    phi = np.array([evaluate_gap(traj.lam[n], traj.eta[n], gap_params, problem.vi_set).phi for n in range(traj.N)])
    Phi = np.vstack(
        [natural_residual(traj.lam[n], problem.F(traj.x[n + 1], traj.u[n], traj.lam[n]), problem.vi_set) for n in range(traj.N)]
    )
    return reporting.write_trajectory(path, traj, phi, Phi)
