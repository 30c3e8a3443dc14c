import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click
from pydantic import ValidationError

from ocpec.bench.affine_dvi import build_affine_dvi
from ocpec.bench.geometry import geometry_demo
from ocpec.bench.reporting import read_trajectory, write_geometry
from ocpec.bench.runner import run as run_benchmark
from ocpec.bench.verification import verify_solution
from ocpec.core.data_models import BenchmarkSpec
from ocpec.core.errors import OcpecError
from ocpec.core.settings import configure_logging, env_output_dir, env_workers, load_config_tree, merge_trees
from ocpec.model.ocpec_model import load_problem

logger = logging.getLogger(__name__)

# flag name -> path in the BenchmarkSpec tree
FLAG_PATHS = {
    "problem": ("problem_id",),
    "N": ("N",),
    "T": ("T",),
    "s": ("s_single",),
    "s0": ("solver", "s0"),
    "s_final": ("solver", "s_final"),
    "kappa_t": ("solver", "kappa_t"),
    "kappa_e": ("solver", "kappa_e"),
    "mu": ("solver", "mu"),
    "eps_kkt": ("solver", "eps_kkt"),
    "eps_sd": ("solver", "eps_sd"),
    "eps_p": ("solver", "eps_p"),
    "eps_d": ("solver", "eps_d"),
    "eps_c": ("solver", "eps_c"),
    "k_max": ("solver", "k_max"),
    "parallel_omega": ("solver", "parallel_projection"),
    "projector_path": ("solver", "projector_path"),
    "c": ("gap", "c"),
    "seed": ("seed",),
    "z0": ("z0_policy",),
    "n_starts": ("n_starts",),
    "workers": ("workers",),
}


def flags_to_tree(flags: Dict[str, Any]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for name, value in flags.items():
        if value is None or name not in FLAG_PATHS:
            continue
        *parents, leaf = FLAG_PATHS[name]
        node = tree
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return tree


def config_to_tree(config: Dict[str, Any]) -> Dict[str, Any]:
    """Flatten the problem/gap/solver/benchmark sections of a config file into one spec tree."""
    tree: Dict[str, Any] = {}
    tree.update(config.get("problem", {}))
    tree.update(config.get("benchmark", {}))
    for section in ("gap", "solver"):
        if section in config:
            tree[section] = config[section]
    return tree


def build_spec(flags: Dict[str, Any], config_path: Optional[str]) -> BenchmarkSpec:
    tree = merge_trees(flags_to_tree(flags), config_to_tree(load_config_tree(config_path)))
    return BenchmarkSpec.model_validate(tree)


def _fail(message: str, code: int = 2):
    click.echo(f"Error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING... (default: $OCPEC_LOG_LEVEL or INFO)")
def cli(log_level: Optional[str]):
    """Gap-constraint OCPEC solver (SGCL) and its affine-DVI benchmark."""
    configure_logging(log_level)


@cli.command()
@click.option("--problem", type=click.Choice(["affine_dvi"]), default=None)
@click.option("--N", "N", type=int, default=None, help="Number of stages")
@click.option("--T", "T", type=float, default=None, help="Horizon in seconds")
@click.option("--mode", type=click.Choice(["single_s", "continuation", "sweep", "random_starts"]), default="continuation")
@click.option("--s", type=float, default=None, help="Relaxation for single_s")
@click.option("--s0", type=float, default=None)
@click.option("--s-final", "s_final", type=float, default=None)
@click.option("--kappa-t", "kappa_t", type=float, default=None)
@click.option("--kappa-e", "kappa_e", type=float, default=None)
@click.option("--mu", type=float, default=None, help="Penalty on the gap slack v")
@click.option("--c", type=float, default=None, help="Gap regularization c")
@click.option("--eps-kkt", "eps_kkt", type=float, default=None)
@click.option("--eps-sd", "eps_sd", type=float, default=None)
@click.option("--eps-p", "eps_p", type=float, default=None)
@click.option("--eps-d", "eps_d", type=float, default=None)
@click.option("--eps-c", "eps_c", type=float, default=None)
@click.option("--k-max", "k_max", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--z0", type=click.Choice(["ones", "zeros", "random"]), default=None, help="Initial guess policy")
@click.option("--n-starts", "n_starts", type=int, default=None)
@click.option("--parallel-omega/--serial-omega", "parallel_omega", default=None)
@click.option("--projector-path", "projector_path", type=click.Choice(["auto", "box", "polyhedral"]), default=None)
@click.option("--workers", type=int, default=None, help="Processes for sweep/random_starts (default: $OCPEC_WORKERS)")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--output-dir", "output_dir", type=click.Path(file_okay=False), default=None)
def run(mode: str, config_path: Optional[str], output_dir: Optional[str], **flags):
    """Solve the benchmark and write trajectory/iterations/report/timings CSVs."""
    if flags.get("workers") is None:
        flags["workers"] = env_workers()
    try:
        spec = build_spec(flags, config_path)
    except (ValidationError, ValueError) as exc:
        _fail(f"invalid configuration: {exc}")
    out = Path(output_dir or env_output_dir())
    try:
        report = run_benchmark(spec, mode, out)
    except OcpecError as exc:
        logger.error(f"run failed: {exc}")
        sys.exit(1)
    for label, record in report.records:
        click.echo(
            f"{label}: s={record.s:.3e} {record.termination} in {record.iterations} it, "
            f"cost={record.cost:.6e}, max|Phi|={record.max_natural_residual:.3e}"
        )
    click.echo(f"artifacts written to {out}")
    sys.exit(0 if report.success else 1)


@cli.command()
@click.option("--c", type=float, default=0.5)
@click.option("--s", type=float, default=0.1)
@click.option("--b-l", "b_l", type=float, default=-1.0)
@click.option("--b-u", "b_u", type=float, default=1.0)
@click.option("--grid", type=int, default=500)
@click.option("--output-dir", "output_dir", type=click.Path(file_okay=False), default=None)
def geometry(c: float, s: float, b_l: float, b_u: float, grid: int, output_dir: Optional[str]):
    """Classify a (lam, eta) grid against the relaxed feasible regions and write geometry.csv."""
    if c <= 0 or s < 0 or not b_l < b_u:
        _fail("need c > 0, s >= 0 and b_l < b_u")
    try:
        table = geometry_demo(c, s, b_l, b_u, grid)
    except ValueError as exc:
        _fail(str(exc))
    path = write_geometry(Path(output_dir or env_output_dir()) / "geometry.csv", table)
    click.echo(f"{len(table.points)} points, {table.disagreements} disagreements -> {path}")
    sys.exit(0 if table.disagreements == 0 else 1)


@cli.command()
@click.argument("trajectory", type=click.Path(exists=True, dir_okay=False))
@click.option("--tol", type=float, default=2e-3, help="Bound on max |Phi|")
@click.option("--dynamics-tol", "dynamics_tol", type=float, default=1e-8)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--problem-file", "problem_file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML/JSON problem tree; the benchmark is used when omitted")
def verify(trajectory: str, tol: float, dynamics_tol: float, config_path: Optional[str], problem_file: Optional[str]):
    """Recompute natural residuals, dynamics defects and path violations of a trajectory CSV."""
    try:
        if problem_file:
            problem, _ = load_problem(load_config_tree(problem_file))
        else:
            problem = build_affine_dvi(build_spec({}, config_path))
        traj = read_trajectory(Path(trajectory), problem)
    except (ValidationError, ValueError, OcpecError) as exc:
        _fail(str(exc))
    verdict = verify_solution(problem, traj, tol, dynamics_tol)
    click.echo(
        f"max|Phi|={verdict.max_natural_residual:.3e} ({'ok' if verdict.natural_residual_ok else 'FAIL'}), "
        f"dynamics={verdict.max_dynamics_residual:.3e} ({'ok' if verdict.dynamics_ok else 'FAIL'}), "
        f"path={verdict.max_path_violation:.3e} ({'ok' if verdict.path_ok else 'FAIL'})"
    )
    if verdict.flagged_stages:
        click.echo(f"flagged stages: {verdict.flagged_stages}")
    sys.exit(0 if verdict.passed else 1)
