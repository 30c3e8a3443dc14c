import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from ocpec.bench import reporting
from ocpec.bench.affine_dvi import build_affine_dvi, initial_guess
from ocpec.bench.geometry import classify_region, geometry_demo, in_region
from ocpec.bench.runner import run
from ocpec.bench.verification import verify_solution
from ocpec.cli import build_spec, cli, flags_to_tree
from ocpec.core.data_models import BenchmarkSpec, GapParams, SgclConfig
from ocpec.core.workflow import relaxation_schedule
from ocpec.model.ocpec_model import Trajectory, discretize, stage_natural_residuals
from ocpec.tools.vi_core import natural_residual

SHORT_HORIZON = {"T": 0.1, "N": 10, "x0": [0.1, 0.1]}


def _exact_trajectory(spec: BenchmarkSpec) -> Trajectory:
    """Implicit-Euler trajectory with lam = 0 and u chosen so that F vanishes at every stage."""
    problem = build_affine_dvi(spec)
    A, B = problem.f.Ax, problem.f.Au
    Fx, Fu = problem.F.Ax, problem.F.Au
    dt = spec.T / spec.N
    system = np.block([[np.eye(2) - dt * A, -dt * B], [Fx, Fu]])
    xs, us = [problem.x0], []
    for _ in range(spec.N):
        sol = np.linalg.solve(system, np.concatenate([xs[-1], [0.0]]))
        xs.append(sol[:2])
        us.append(sol[2:])
    return Trajectory(
        t=dt * np.arange(spec.N + 1),
        x=np.array(xs),
        u=np.array(us),
        lam=np.zeros((spec.N, 1)),
        eta=np.zeros((spec.N, 1)),
        v=np.zeros(spec.N),
    )


def _write_config(path, tree):
    path.write_text(yaml.safe_dump(tree), encoding="utf-8")
    return str(path)


######
def test_benchmark_problem_data(benchmark_problem):
    p = benchmark_problem
    x0, u0, lam0 = p.x0, np.zeros(1), np.zeros(1)
    np.testing.assert_allclose(p.f(x0, u0, lam0), [2.5, -6.0])
    np.testing.assert_array_equal(p.F(np.zeros(2), u0, lam0), [0.0])
    assert (p.n_x, p.n_u, p.n_lambda, p.vi_set.n_g, p.n_G) == (2, 1, 1, 2, 6)
    np.testing.assert_array_equal(natural_residual(lam0, p.F(np.zeros(2), u0, lam0), p.vi_set), [0.0])


def test_linear_reference_policy():
    spec = BenchmarkSpec(x_ref_policy="linear", x_e=[1.0, 0.0])
    cost = build_affine_dvi(spec).L_S
    np.testing.assert_allclose(cost.reference(0.0), [-0.5, -1.0])
    np.testing.assert_allclose(cost.reference(0.5), [0.25, -0.5])
    np.testing.assert_allclose(cost.reference(1.0), [1.0, 0.0])


@pytest.mark.parametrize("policy", ["ones", "zeros", "random"])
def test_initial_guess_policies(policy, benchmark_nlp):
    z0 = initial_guess(benchmark_nlp, policy, seed=3)
    assert z0.shape == (600,)
    np.testing.assert_array_equal(z0, initial_guess(benchmark_nlp, policy, seed=3))


######
def test_geometry_grid_has_no_disagreements():
    table = geometry_demo(0.5, 0.1, -1.0, 1.0, 500)
    assert len(table.points) == 250_000
    assert table.disagreements == 0
    assert {p.region for p in table.points} == {0, 1, 2, 3}


@pytest.mark.parametrize(
    "lam, eta, expected",
    [(0.0, 0.0, 2), (2.5, 0.0, 0), (0.0, 1.0, 0), (0.9, -0.5, 3), (-0.9, 0.5, 1)],
)
def test_classify_region_examples(lam, eta, expected):
    assert classify_region(lam, eta, 0.5, 0.1, -1.0, 1.0) == expected


def test_classification_on_the_mid_region_boundary():
    c, s = 0.5, 0.1
    eta = np.sqrt(2 * c * s)
    assert classify_region(0.0, eta, c, s, -1.0, 1.0) == 2
    assert classify_region(0.0, eta * (1 + 1e-9), c, s, -1.0, 1.0) == 0
    assert classify_region(0.0, eta * (1 - 1e-9), c, s, -1.0, 1.0) == 2


def test_region_edges_belong_to_both_neighbours():
    c, s = 0.5, 0.1
    lam = -0.8
    eta = c * (lam + 1.0)
    assert in_region(1, lam, eta, c, s, -1.0, 1.0)
    assert in_region(2, lam, eta, c, s, -1.0, 1.0)
    assert not in_region(3, lam, eta, c, s, -1.0, 1.0)
    assert not in_region(1, lam, eta - 1e-6, c, s, -1.0, 1.0)
    with pytest.raises(ValueError):
        in_region(4, lam, eta, c, s, -1.0, 1.0)


@pytest.mark.parametrize("c, s, b_l, b_u", [(2.0, 0.01, 0.0, 3.0), (0.1, 0.5, -2.0, -0.5)])
def test_region_union_matches_the_gap_bound(c, s, b_l, b_u):
    table = geometry_demo(c, s, b_l, b_u, 120)
    assert table.disagreements == 0
    assert all(p.relaxed_feasible == (p.region > 0) for p in table.points)


def test_geometry_rejects_tiny_grid():
    with pytest.raises(ValueError):
        geometry_demo(0.5, 0.1, -1.0, 1.0, 1)


######
def test_exact_trajectory_verifies():
    spec = BenchmarkSpec(**SHORT_HORIZON)
    verdict = verify_solution(build_affine_dvi(spec), _exact_trajectory(spec), tol=1e-12, dynamics_tol=1e-12)
    assert verdict.passed
    assert verdict.flagged_stages == []
    assert verdict.max_natural_residual <= 1e-12


def test_perturbed_stage_is_flagged_alone():
    spec = BenchmarkSpec(**SHORT_HORIZON)
    traj = _exact_trajectory(spec)
    traj.lam[4, 0] += 1e-2
    verdict = verify_solution(build_affine_dvi(spec), traj, tol=1e-3)
    assert verdict.flagged_stages == [4]
    assert verdict.stage_natural_residuals[4] == pytest.approx(0.05, rel=1e-6)
    assert not verdict.passed


######
def test_trajectory_csv_round_trip(tmp_path, rng):
    spec = BenchmarkSpec(**SHORT_HORIZON)
    problem = build_affine_dvi(spec)
    traj = _exact_trajectory(spec)
    traj.lam = rng.uniform(-1.0, 1.0, size=traj.lam.shape)
    traj.eta = rng.normal(size=traj.eta.shape)
    traj.v = rng.normal(size=traj.v.shape) * 1e-7
    phi = rng.normal(size=spec.N)
    Phi = stage_natural_residuals(problem, traj)
    path = reporting.write_trajectory(tmp_path / "trajectory.csv", traj, phi, Phi)

    header, rows = reporting.read_csv(path)
    assert header == ["n", "t", "x1", "x2", "u1", "lam1", "eta1", "v", "phi", "Phi1"]
    assert [float(r["phi"]) for r in rows] == phi.tolist()

    loaded = reporting.read_trajectory(path, problem)
    for name in ("t", "x", "u", "lam", "eta", "v"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(traj, name))


def test_read_trajectory_rejects_foreign_columns(tmp_path, benchmark_problem):
    path = reporting.write_csv(tmp_path / "bad.csv", ["n", "t", "x"], [[1, 0.1, 0.0]])
    with pytest.raises(ValueError):
        reporting.read_trajectory(path, benchmark_problem)


def test_csv_cells():
    assert reporting._cell(True) == 1
    assert reporting._cell(np.float64(0.1)) == "0.1"
    assert reporting._cell(np.int64(3)) == 3
    assert reporting._cell("StopKkt") == "StopKkt"


######
@pytest.mark.slow
def test_runs_are_deterministic(tmp_path):
    spec = BenchmarkSpec()
    first = run(spec, "single_s", tmp_path / "a")
    second = run(spec, "single_s", tmp_path / "b")
    assert first.success and second.success
    for name in ("iterations.csv", "report.csv", "trajectory.csv"):
        assert (tmp_path / "a" / name).is_file()
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "timings.csv").is_file()


def test_random_starts_are_labelled_by_seed(tmp_path):
    spec = BenchmarkSpec(N=10, n_starts=2, seed=5, solver=SgclConfig(s0=1e-1, s_final=1e-2))
    report = run(spec, "random_starts", tmp_path)
    assert [o.label for o in report.outcomes] == ["seed=5", "seed=6"]


@pytest.mark.slow
def test_single_relaxation_run(tmp_path):
    report = run(BenchmarkSpec(), "single_s", tmp_path)
    assert report.success
    _, rows = reporting.read_csv(tmp_path / "report.csv")
    assert len(rows) == 1
    assert float(rows[0]["max_natural_residual"]) <= 2e-3

    problem = build_affine_dvi(BenchmarkSpec())
    verdict = verify_solution(problem, reporting.read_trajectory(tmp_path / "trajectory.csv", problem), 2e-3, 1e-8)
    assert verdict.passed


@pytest.mark.slow
def test_continuation_report_follows_schedule(tmp_path):
    config = SgclConfig(s_final=1e-7)
    report = run(BenchmarkSpec(solver=config), "continuation", tmp_path)
    assert report.success
    _, rows = reporting.read_csv(tmp_path / "report.csv")
    schedule = relaxation_schedule(config)
    assert [float(r["s"]) for r in rows] == schedule
    assert float(rows[1]["s"]) == pytest.approx(0.0316228, abs=1e-7)


@pytest.mark.slow
def test_final_residual_shrinks_with_final_relaxation(tmp_path):
    report = run(BenchmarkSpec(), "sweep", tmp_path)
    final = {o.s_final: o.records[-1].max_natural_residual for o in report.outcomes}
    levels = sorted(final, reverse=True)
    for bigger, smaller in zip(levels, levels[1:]):
        assert final[smaller] <= 10.0 * final[bigger]
    assert final[1e-6] <= 2e-3
    assert final[1e-7] <= 1e-3


######
def test_flags_map_onto_spec_tree():
    tree = flags_to_tree({"s_final": 1e-3, "c": 2.0, "N": 50, "mode": "sweep", "mu": None})
    assert tree == {"solver": {"s_final": 1e-3}, "gap": {"c": 2.0}, "N": 50}


def test_config_file_overrides_flags(tmp_path):
    config = _write_config(tmp_path / "run.yaml", {"problem": {"N": 20}, "solver": {"mu": 10.0}})
    spec = build_spec({"N": 50, "mu": 1.0, "kappa_t": 0.5}, config)
    assert spec.N == 20
    assert spec.solver.mu == 10.0
    assert spec.solver.kappa_t == 0.5


def test_cli_geometry(tmp_path):
    result = CliRunner().invoke(cli, ["geometry", "--grid", "50", "--output-dir", str(tmp_path)])
    assert result.exit_code == 0, result.output
    _, rows = reporting.read_csv(tmp_path / "geometry.csv")
    assert len(rows) == 2500


def test_cli_geometry_rejects_bad_parameters(tmp_path):
    result = CliRunner().invoke(cli, ["geometry", "--c", "-1", "--output-dir", str(tmp_path)])
    assert result.exit_code == 2


def test_cli_run_rejects_invalid_config(tmp_path):
    config = _write_config(tmp_path / "bad.yaml", {"problem": {"N": 0}})
    result = CliRunner().invoke(cli, ["run", "--config", config, "--output-dir", str(tmp_path)])
    assert result.exit_code == 2


def test_cli_verify(tmp_path):
    spec = BenchmarkSpec(**SHORT_HORIZON)
    problem = build_affine_dvi(spec)
    config = _write_config(tmp_path / "short.yaml", {"problem": SHORT_HORIZON})
    traj = _exact_trajectory(spec)
    Phi = stage_natural_residuals(problem, traj)
    good = reporting.write_trajectory(tmp_path / "good.csv", traj, np.zeros(spec.N), Phi)
    args = ["verify", str(good), "--config", config, "--tol", "1e-10", "--dynamics-tol", "1e-10"]
    result = CliRunner().invoke(cli, args)
    assert result.exit_code == 0, result.output

    traj.lam[4, 0] += 1e-2
    bad = reporting.write_trajectory(tmp_path / "bad.csv", traj, np.zeros(spec.N), Phi)
    result = CliRunner().invoke(cli, ["verify", str(bad), "--config", config, "--tol", "1e-3"])
    assert result.exit_code == 1
    assert "flagged stages: [4]" in result.output


def test_discretized_benchmark_matches_spec(benchmark_spec):
    problem = build_affine_dvi(benchmark_spec)
    nlp = discretize(problem, benchmark_spec.N, benchmark_spec.s_single, benchmark_spec.solver.mu, GapParams.identity(1))
    assert nlp.dt == pytest.approx(benchmark_spec.T / benchmark_spec.N)
