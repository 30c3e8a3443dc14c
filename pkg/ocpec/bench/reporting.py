"""CSV artifacts.

Column order is fixed per file; floats are written with repr so a parse with
float() reproduces them bit for bit.

    trajectory.csv  n, t, x1..x{n_x}, u1..u{n_u}, lam1.., eta1.., v, phi, Phi1..
    iterations.csv  run, s, k, J, M, E_p, E_d, E_c, alpha, step_norm
    report.csv      run, s, cost, max_natural_residual, iterations, termination
    timings.csv     run, s, omega, derivatives, qp, line_search, other, total
    geometry.csv    lam, eta, region, phi, relaxed_feasible
"""

import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from ocpec.bench.geometry import GeometryTable
from ocpec.core.data_models import ContinuationRecord
from ocpec.model.ocpec_model import OcpecProblem, Trajectory
from ocpec.solvers.sgcl import IterationRecord

logger = logging.getLogger(__name__)

ITERATION_COLUMNS = ["run", "s", "k", "J", "M", "E_p", "E_d", "E_c", "alpha", "step_norm"]
REPORT_COLUMNS = ["run", "s", "cost", "max_natural_residual", "iterations", "termination"]
TIMING_COLUMNS = ["run", "s", "omega", "derivatives", "qp", "line_search", "other", "total"]
GEOMETRY_COLUMNS = ["lam", "eta", "region", "phi", "relaxed_feasible"]


def trajectory_columns(n_x: int, n_u: int, n_lambda: int) -> List[str]:
    return (
        ["n", "t"]
        + [f"x{i + 1}" for i in range(n_x)]
        + [f"u{i + 1}" for i in range(n_u)]
        + [f"lam{i + 1}" for i in range(n_lambda)]
        + [f"eta{i + 1}" for i in range(n_lambda)]
        + ["v", "phi"]
        + [f"Phi{i + 1}" for i in range(n_lambda)]
    )


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return int(value)
    return value


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    logger.debug(f"wrote {path}")
    return path


def read_csv(path: Path) -> Tuple[List[str], List[Dict[str, str]]]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def write_trajectory(path: Path, traj: Trajectory, phi: np.ndarray, Phi: np.ndarray) -> Path:
    n_x, n_u, n_lam = traj.x.shape[1], traj.u.shape[1], traj.lam.shape[1]
    rows = []
    for n in range(traj.N):
        rows.append(
            [n + 1, traj.t[n + 1], *traj.x[n + 1], *traj.u[n], *traj.lam[n], *traj.eta[n], traj.v[n], phi[n], *Phi[n]]
        )
    return write_csv(path, trajectory_columns(n_x, n_u, n_lam), rows)


def read_trajectory(path: Path, problem: OcpecProblem) -> Trajectory:
    """Load trajectory.csv for `problem`; x0 is taken from the problem."""
    header, rows = read_csv(path)
    expected = trajectory_columns(problem.n_x, problem.n_u, problem.n_lambda)
    if header != expected:
        raise ValueError(f"{path} has columns {header}, expected {expected}")

    def block(prefix: str, width: int) -> np.ndarray:
        return np.array([[float(r[f"{prefix}{i + 1}"]) for i in range(width)] for r in rows]).reshape(len(rows), width)

    return Trajectory(
        t=np.concatenate([[0.0], [float(r["t"]) for r in rows]]),
        x=np.vstack([problem.x0, block("x", problem.n_x)]),
        u=block("u", problem.n_u),
        lam=block("lam", problem.n_lambda),
        eta=block("eta", problem.n_lambda),
        v=np.array([float(r["v"]) for r in rows]),
    )


def iteration_rows(run: str, s: float, records: Sequence[IterationRecord]) -> List[list]:
    return [[run, s, r.k, r.J, r.M, r.E_p, r.E_d, r.E_c, r.alpha, r.step_norm] for r in records]


def report_row(run: str, record: ContinuationRecord) -> list:
    return [run, record.s, record.cost, record.max_natural_residual, record.iterations, record.termination]


def timing_row(run: str, record: ContinuationRecord) -> list:
    return [run, record.s] + [record.timings.get(col, 0.0) for col in TIMING_COLUMNS[2:]]


def write_geometry(path: Path, table: GeometryTable) -> Path:
    rows = ([p.lam, p.eta, p.region, p.phi, p.relaxed_feasible] for p in table.points)
    return write_csv(path, GEOMETRY_COLUMNS, rows)
