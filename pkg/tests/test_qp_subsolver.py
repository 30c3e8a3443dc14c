import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from ocpec.core.data_models import VISet
from ocpec.tools.qp_subsolver import (
    QpStatus,
    SparseQp,
    _polish,
    elastic_qp,
    kkt_residual,
    solve_elastic_qp,
    solve_projection_qp,
    solve_sparse_qp,
)


def _qp(H, grad, A_eq=None, b_eq=(), A_in=None, b_in=(), **kwargs):
    n = len(grad)
    return SparseQp(
        H=sp.csc_matrix(np.asarray(H, dtype=float)),
        grad=grad,
        A_eq=sp.csc_matrix(np.asarray(A_eq, dtype=float)) if A_eq is not None else None,
        b_eq=np.asarray(b_eq, dtype=float),
        A_in=sp.csc_matrix(np.asarray(A_in, dtype=float)) if A_in is not None else sp.csc_matrix((0, n)),
        b_in=np.asarray(b_in, dtype=float),
        **kwargs,
    )


def _enumeration_oracle(H, grad, A_eq, b_eq, A_in, b_in):
    """Best feasible minimizer over every choice of rows held at equality."""
    n = H.shape[0]
    best_x, best_obj = None, np.inf
    for k in range(b_in.size + 1):
        for rows in itertools.combinations(range(b_in.size), k):
            C = np.vstack([A_eq, A_in[list(rows)]])
            d = np.concatenate([b_eq, -b_in[list(rows)]])
            m = C.shape[0]
            K = np.block([[H, C.T], [C, np.zeros((m, m))]])
            sol = np.linalg.lstsq(K, np.concatenate([-grad, d]), rcond=None)[0]
            x = sol[:n]
            if np.abs(C @ x - d).max(initial=0.0) > 1e-9 or (A_in @ x + b_in).min(initial=0.0) < -1e-9:
                continue
            obj = 0.5 * x @ H @ x + grad @ x
            if obj < best_obj - 1e-12:
                best_x, best_obj = x, obj
    return best_x


def test_unconstrained_minimizer():
    sol = solve_sparse_qp(_qp(np.eye(2), [-1.0, -1.0]))
    assert sol.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(sol.primal, [1.0, 1.0], atol=1e-10)


def test_single_upper_bound():
    # dz <= 0.5 written as -dz + 0.5 >= 0
    sol = solve_sparse_qp(_qp([[1.0]], [-1.0], A_in=[[-1.0]], b_in=[0.5]))
    assert sol.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(sol.primal, [0.5], atol=1e-8)
    np.testing.assert_allclose(sol.in_multipliers, [0.5], atol=1e-7)
    assert sol.kkt_residual <= 1e-9


def test_duplicated_rows_split_the_multiplier():
    sol = solve_sparse_qp(_qp([[1.0]], [-1.0], A_in=[[-1.0], [-1.0]], b_in=[0.5, 0.5]))
    assert sol.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(sol.primal, [0.5], atol=1e-8)
    assert sol.in_multipliers.sum() == pytest.approx(0.5, abs=1e-7)
    assert sol.in_multipliers.min() >= 0.0


def test_random_qps_match_enumeration(rng):
    for trial in range(100):
        n = int(rng.integers(2, 9))
        m_eq = int(rng.integers(0, min(3, n)))
        m_in = int(rng.integers(1, 7))
        B = rng.standard_normal((n, n))
        H = B @ B.T + 0.1 * np.eye(n)
        grad = rng.normal(scale=3.0, size=n)
        x_feas = rng.normal(size=n)
        A_eq = rng.standard_normal((m_eq, n))
        b_eq = A_eq @ x_feas
        A_in = rng.standard_normal((m_in, n))
        b_in = -A_in @ x_feas + rng.uniform(0.0, 1.0, size=m_in)
        if trial < 20:
            dup = rng.integers(0, m_in, size=int(rng.integers(1, 3)))
            A_in, b_in = np.vstack([A_in, A_in[dup]]), np.concatenate([b_in, b_in[dup]])

        qp = _qp(H, grad, A_eq if m_eq else None, b_eq, A_in, b_in)
        sol = solve_sparse_qp(qp)
        assert sol.status is QpStatus.OPTIMAL, f"trial {trial}"
        assert sol.kkt_residual <= 1e-9
        expected = _enumeration_oracle(H, grad, A_eq, b_eq, A_in, b_in)
        np.testing.assert_allclose(sol.primal, expected, atol=1e-6, err_msg=f"trial {trial}")


def test_warm_start_never_worsens_the_residual(rng):
    n = 5
    B = rng.standard_normal((n, n))
    H = B @ B.T + np.eye(n)
    A_in = rng.standard_normal((4, n))
    qp = _qp(H, rng.normal(size=n), A_in=A_in, b_in=np.ones(4))
    cold = solve_sparse_qp(qp)
    assert cold.status is QpStatus.OPTIMAL

    again = solve_sparse_qp(qp, warm=cold)
    assert again.iterations == 0
    assert again.kkt_residual <= cold.kkt_residual

    perturbed = type(cold)(
        primal=cold.primal + 1e-3,
        eq_multipliers=cold.eq_multipliers,
        in_multipliers=cold.in_multipliers,
        status=cold.status,
        kkt_residual=cold.kkt_residual,
    )
    entry = kkt_residual(qp, perturbed.primal, perturbed.eq_multipliers, perturbed.in_multipliers)
    assert solve_sparse_qp(qp, warm=perturbed).kkt_residual <= entry


def test_stage_ordering_gives_the_same_step(rng):
    n = 6
    B = rng.standard_normal((n, n))
    H = B @ B.T + np.eye(n)
    grad = rng.normal(size=n)
    A_eq = rng.standard_normal((2, n))
    A_in = rng.standard_normal((3, n))
    plain = solve_sparse_qp(_qp(H, grad, A_eq, [0.1, -0.2], A_in, np.ones(3)))
    staged = solve_sparse_qp(
        _qp(
            H, grad, A_eq, [0.1, -0.2], A_in, np.ones(3),
            primal_stage=np.array([0, 0, 0, 1, 1, 1]), eq_stage=np.array([0, 1]),
        )
    )
    np.testing.assert_allclose(staged.primal, plain.primal, atol=1e-8)


def test_inconsistent_constraints_are_infeasible():
    # dz >= 1 and dz <= 0
    sol = solve_sparse_qp(_qp([[1.0]], [0.0], A_in=[[1.0], [-1.0]], b_in=[-1.0, 0.0]), max_iter=100)
    assert sol.status is QpStatus.INFEASIBLE


def test_elastic_step_for_contradictory_bounds():
    qp = _qp([[1.0]], [0.0], A_in=[[1.0], [-1.0]], b_in=[-1.0, 0.0])
    sol, slacks = solve_elastic_qp(qp, penalty=10.0)
    assert sol.status is not QpStatus.INFEASIBLE
    np.testing.assert_allclose(sol.primal, [0.0], atol=1e-6)
    np.testing.assert_allclose(slacks, [1.0, 0.0], atol=1e-6)
    assert sol.in_multipliers.shape == (2,)
    assert sol.in_multipliers[0] == pytest.approx(10.0, abs=1e-5)


def test_elastic_step_matches_plain_step_when_consistent():
    qp = _qp([[1.0]], [-1.0], A_in=[[-1.0]], b_in=[0.5])
    sol, slacks = solve_elastic_qp(qp, penalty=10.0)
    assert sol.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(sol.primal, [0.5], atol=1e-7)
    np.testing.assert_allclose(slacks, [0.0], atol=1e-7)
    np.testing.assert_allclose(sol.in_multipliers, [0.5], atol=1e-6)


def test_elastic_qp_layout():
    qp = _qp(np.eye(2), [1.0, 2.0], A_eq=[[1.0, 1.0]], b_eq=[3.0], A_in=[[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]], b_in=[0.0, 1.0, 2.0])
    ext = elastic_qp(qp, 7.0)
    assert ext.n == 5
    assert ext.A_eq.shape == (1, 5) and ext.A_in.shape == (6, 5)
    np.testing.assert_array_equal(ext.grad, [1.0, 2.0, 7.0, 7.0, 7.0])
    np.testing.assert_array_equal(ext.b_in, [0.0, 1.0, 2.0, 0.0, 0.0, 0.0])
    assert ext.primal_stage is None


def test_elastic_step_keeps_inconsistent_equalities_infeasible():
    qp = _qp([[1.0]], [0.0], A_eq=[[1.0], [1.0]], b_eq=[0.0, 1.0], A_in=[[1.0]], b_in=[2.0])
    sol, _ = solve_elastic_qp(qp, penalty=10.0, max_iter=100)
    assert sol.status is QpStatus.INFEASIBLE


def test_degenerate_vertex_reaches_optimal():
    # x1 <= 0, x2 <= 0 and x1 + x2 <= 0 all active at the minimizer
    qp = _qp(np.eye(2), [-1.0, -1.0], A_in=[[-1.0, 0.0], [0.0, -1.0], [-1.0, -1.0]], b_in=[0.0, 0.0, 0.0])
    sol = solve_sparse_qp(qp)
    assert sol.status is QpStatus.OPTIMAL
    assert sol.kkt_residual <= 1e-9
    np.testing.assert_allclose(sol.primal, [0.0, 0.0], atol=1e-8)
    assert sol.in_multipliers.min() >= 0.0


def test_polish_recovers_nonnegative_multipliers_at_a_vertex():
    qp = _qp(np.eye(2), [-1.0, -1.0], A_in=[[-1.0, 0.0], [0.0, -1.0], [-1.0, -1.0]], b_in=[0.0, 0.0, 0.0])
    x, y_eq, y_in = _polish(qp, np.array([-1e-6, 2e-6]), np.ones(3))
    assert y_eq.size == 0
    assert y_in.min() >= 0.0
    np.testing.assert_allclose(x, [0.0, 0.0], atol=1e-12)
    assert kkt_residual(qp, x, y_eq, y_in) <= 1e-12


def test_sparse_qp_rejects_bad_shapes():
    with pytest.raises(ValueError):
        _qp(np.eye(2), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        _qp([[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0])


@pytest.fixture
def interval_as_rows():
    return VISet.polyhedral([[1.0], [-1.0]], [1.0, 1.0])


def test_projection_interior(interval_as_rows):
    omega, active = solve_projection_qp(np.eye(1), 1.0, [0.0], [0.0], interval_as_rows)
    np.testing.assert_allclose(omega, [0.0], atol=1e-15)
    assert active == ()


def test_projection_clamps_to_lower_row(interval_as_rows):
    omega, active = solve_projection_qp(np.eye(1), 1.0, [0.0], [2.0], interval_as_rows)
    np.testing.assert_allclose(omega, [-1.0], atol=1e-14)
    assert active == (0,)


def test_projection_recovers_from_wrong_warm_start(interval_as_rows):
    omega, active = solve_projection_qp(np.eye(1), 1.0, [0.0], [2.0], interval_as_rows, warm_active_set=[1])
    np.testing.assert_allclose(omega, [-1.0], atol=1e-14)
    assert active == (0,)


def test_projection_is_warm_start_independent(rng):
    tri = VISet.polyhedral([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0], [1.0, 0.0]], [0.0, 0.0, 1.0, 0.0])
    A = np.array([[1.5, -0.4], [-0.4, 0.8]])
    for _ in range(200):
        lam = rng.normal(size=2)
        eta = rng.normal(scale=2.0, size=2)
        cold, _ = solve_projection_qp(A, 0.7, lam, eta, tri)
        warm_set = [int(i) for i in np.flatnonzero(rng.random(4) < 0.5)]
        warm, _ = solve_projection_qp(A, 0.7, lam, eta, tri, warm_active_set=warm_set)
        np.testing.assert_allclose(warm, cold, atol=1e-10)
