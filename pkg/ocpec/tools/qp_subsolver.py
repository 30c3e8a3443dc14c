"""Convex QP engines.

`solve_sparse_qp` handles the structured QP that yields the SGCL search
direction:

    min  1/2 dz^T H dz + grad^T dz
    s.t. A_eq dz = b_eq,   A_in dz + b_in >= 0

with Lagrangian 1/2 dz^T H dz + grad^T dz + y_h^T (A_eq dz - b_eq) - y_c^T (A_in dz + b_in).
It is a primal-dual interior point method whose Newton systems are
proximally regularized around the current iterate, so it needs no
constraint qualification. `solve_projection_qp` is a small dense primal
active-set method for the skewed projection onto a polyhedron.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import nnls
from scipy.sparse.linalg import splu

from ocpec.core.data_models import VISet
from ocpec.core.errors import ProjectionError

logger = logging.getLogger(__name__)

DEFAULT_QP_TOLERANCE = 1e-9
FRACTION_TO_BOUNDARY = 0.995
REGULARIZATION_MIN = 1e-11
REGULARIZATION_MAX = 1e-4
DUAL_DIVERGENCE = 1e8  # relative to the size of the QP data
INFEASIBLE_PRIMAL = 1e-6
STALL_WINDOW = 10
POLISH_MAX_SIZE = 400


class QpStatus(str, Enum):
    OPTIMAL = "Optimal"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


@dataclass
class SparseQp:
    H: sp.spmatrix
    grad: np.ndarray
    A_eq: sp.spmatrix
    b_eq: np.ndarray
    A_in: sp.spmatrix
    b_in: np.ndarray
    # optional stage label of every primal variable and equality row, used to
    # order the KKT system stage by stage before factorization
    primal_stage: Optional[np.ndarray] = None
    eq_stage: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = sp.csc_matrix(self.H, dtype=float)
        n = self.H.shape[0]
        self.grad = np.asarray(self.grad, dtype=float).reshape(-1)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        self.b_in = np.asarray(self.b_in, dtype=float).reshape(-1)
        self.A_eq = sp.csc_matrix(self.A_eq, dtype=float) if self.b_eq.size else sp.csc_matrix((0, n))
        self.A_in = sp.csc_matrix(self.A_in, dtype=float) if self.b_in.size else sp.csc_matrix((0, n))
        if self.H.shape != (n, n) or self.grad.size != n:
            raise ValueError(f"H {self.H.shape} and grad ({self.grad.size}) are inconsistent")
        if self.A_eq.shape != (self.b_eq.size, n):
            raise ValueError(f"A_eq {self.A_eq.shape} does not match b_eq ({self.b_eq.size}) and n={n}")
        if self.A_in.shape != (self.b_in.size, n):
            raise ValueError(f"A_in {self.A_in.shape} does not match b_in ({self.b_in.size}) and n={n}")
        asym = abs(self.H - self.H.T)
        if asym.nnz and asym.max() > 1e-12 * max(1.0, abs(self.H).max()):
            raise ValueError("H must be symmetric")

    @property
    def n(self) -> int:
        return self.H.shape[0]


@dataclass
class QpSolution:
    primal: np.ndarray
    eq_multipliers: np.ndarray
    in_multipliers: np.ndarray
    status: QpStatus
    kkt_residual: float
    iterations: int = 0


def kkt_residual(qp: SparseQp, x: np.ndarray, y_eq: np.ndarray, y_in: np.ndarray) -> float:
    stationarity = qp.H @ x + qp.grad + qp.A_eq.T @ y_eq - qp.A_in.T @ y_in
    slack = qp.A_in @ x + qp.b_in
    parts = [
        np.abs(stationarity).max(initial=0.0),
        np.abs(qp.A_eq @ x - qp.b_eq).max(initial=0.0),
        np.abs(np.minimum(slack, 0.0)).max(initial=0.0),
        np.abs(np.minimum(y_in, 0.0)).max(initial=0.0),
        np.abs(slack * y_in).max(initial=0.0),
    ]
    return float(max(parts))


def _primal_infeasibility(qp: SparseQp, x: np.ndarray) -> float:
    slack = qp.A_in @ x + qp.b_in
    return float(
        max(np.abs(qp.A_eq @ x - qp.b_eq).max(initial=0.0), np.abs(np.minimum(slack, 0.0)).max(initial=0.0))
    )


def _fraction_to_boundary(v: np.ndarray, dv: np.ndarray) -> float:
    shrinking = dv < 0.0
    if not shrinking.any():
        return 1.0
    return float(min(1.0, (-v[shrinking] / dv[shrinking]).min()))


def _stage_permutation(qp: SparseQp) -> Optional[np.ndarray]:
    if qp.primal_stage is None or qp.eq_stage is None:
        return None
    labels = np.concatenate([np.asarray(qp.primal_stage), np.asarray(qp.eq_stage)])
    return np.argsort(labels, kind="stable")


class _KktFactor:
    """Factorization of the regularized, condensed Newton matrix

        [ H + A_in^T D A_in + rho I   A_eq^T   ]
        [ A_eq                        -delta I ]
    """

    def __init__(self, qp: SparseQp, D: np.ndarray, rho: float, delta: float, perm: Optional[np.ndarray]):
        n, m_e = qp.n, qp.b_eq.size
        K11 = qp.H + qp.A_in.T @ sp.diags(D) @ qp.A_in + rho * sp.eye(n)
        K = sp.bmat([[K11, qp.A_eq.T], [qp.A_eq, -delta * sp.eye(m_e)]], format="csc")
        self.n = n
        self.perm = perm
        if perm is not None:
            K = K[perm][:, perm].tocsc()
            self.lu = splu(K, permc_spec="NATURAL")
        else:
            self.lu = splu(K, permc_spec="COLAMD")

    def solve(self, rhs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if self.perm is None:
            sol = self.lu.solve(rhs)
        else:
            sol = np.empty_like(rhs)
            sol[self.perm] = self.lu.solve(rhs[self.perm])
        return sol[: self.n], sol[self.n :]


def solve_sparse_qp(
    qp: SparseQp,
    warm: Optional[QpSolution] = None,
    tol: float = DEFAULT_QP_TOLERANCE,
    max_iter: int = 200,
) -> QpSolution:
    n, m_e, m_i = qp.n, qp.b_eq.size, qp.b_in.size
    A_in, A_eq = qp.A_in, qp.A_eq
    perm = _stage_permutation(qp)

    entry_residual = np.inf
    if warm is not None:
        x = warm.primal.astype(float).copy()
        y_eq = warm.eq_multipliers.astype(float).copy()
        y_in = warm.in_multipliers.astype(float).copy()
        entry_residual = kkt_residual(qp, x, y_eq, y_in)
        if entry_residual <= tol:
            return QpSolution(x, y_eq, y_in, QpStatus.OPTIMAL, entry_residual, 0)
        best = (entry_residual, x.copy(), y_eq.copy(), y_in.copy())
        y_in = np.maximum(y_in, 1e-4)
        w = np.maximum(A_in @ x + qp.b_in, 1e-4)
    else:
        x = np.zeros(n)
        y_eq = np.zeros(m_e)
        y_in = np.ones(m_i)
        w = np.maximum(np.abs(A_in @ x + qp.b_in), 1.0)
        best = (np.inf, x.copy(), y_eq.copy(), y_in.copy())

    data_scale = 1.0 + max(
        np.abs(qp.grad).max(initial=0.0), np.abs(qp.b_eq).max(initial=0.0), np.abs(qp.b_in).max(initial=0.0)
    )
    infeasible_threshold = max(INFEASIBLE_PRIMAL, 1e3 * tol)
    primal_history: list = []
    status = QpStatus.MAX_ITER
    iteration = 0
    for iteration in range(1, max_iter + 1):
        slack = A_in @ x + qp.b_in
        r_d = qp.H @ x + qp.grad + A_eq.T @ y_eq - A_in.T @ y_in
        r_p = A_eq @ x - qp.b_eq
        r_i = slack - w
        mu = float(w @ y_in) / m_i if m_i else 0.0

        residual = kkt_residual(qp, x, y_eq, y_in)
        if residual < best[0]:
            best = (residual, x.copy(), y_eq.copy(), y_in.copy())
        if residual <= tol:
            status = QpStatus.OPTIMAL
            break
        primal_history.append(_primal_infeasibility(qp, x))
        if max(np.abs(y_eq).max(initial=0.0), np.abs(y_in).max(initial=0.0)) > DUAL_DIVERGENCE * data_scale:
            # growing multipliers only signal infeasibility while the primal residual stalls
            stalled = (
                len(primal_history) > STALL_WINDOW
                and primal_history[-1] > infeasible_threshold
                and primal_history[-1] > 0.9 * primal_history[-1 - STALL_WINDOW]
            )
            if stalled or primal_history[-1] <= infeasible_threshold:
                logger.debug(
                    f"QP multipliers grew past {DUAL_DIVERGENCE * data_scale:.1e} at iteration {iteration} "
                    f"(primal residual {primal_history[-1]:.3e})"
                )
                break

        reg = min(REGULARIZATION_MAX, max(REGULARIZATION_MIN, 0.1 * mu))
        D = y_in / w
        try:
            kkt = _KktFactor(qp, D, reg, reg, perm)
        except RuntimeError as exc:
            logger.warning(f"KKT factorization failed at QP iteration {iteration}: {exc}")
            break

        def direction(target: np.ndarray):
            rhs_x = -r_d + A_in.T @ (target / w - D * r_i)
            dx, dy_eq = kkt.solve(np.concatenate([rhs_x, -r_p]))
            dw = A_in @ dx + r_i
            dy_in = target / w - D * dw
            return dx, dy_eq, dw, dy_in

        # predictor
        dx, dy_eq, dw, dy_in = direction(-w * y_in)
        if m_i:
            alpha_aff = min(_fraction_to_boundary(w, dw), _fraction_to_boundary(y_in, dy_in))
            mu_aff = float((w + alpha_aff * dw) @ (y_in + alpha_aff * dy_in)) / m_i
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # corrector
            dx, dy_eq, dw, dy_in = direction(sigma * mu - w * y_in - dw * dy_in)
            alpha = min(
                1.0,
                FRACTION_TO_BOUNDARY * _fraction_to_boundary(w, dw),
                FRACTION_TO_BOUNDARY * _fraction_to_boundary(y_in, dy_in),
            )
        else:
            alpha = 1.0

        x = x + alpha * dx
        y_eq = y_eq + alpha * dy_eq
        w = w + alpha * dw
        y_in = y_in + alpha * dy_in
    else:
        residual = kkt_residual(qp, x, y_eq, y_in)
        if residual < best[0]:
            best = (residual, x.copy(), y_eq.copy(), y_in.copy())

    best_residual, x, y_eq, y_in = best
    if best_residual > tol and n + m_e + m_i <= POLISH_MAX_SIZE:
        polished = _polish(qp, x, y_in)
        if polished is not None:
            polished_residual = kkt_residual(qp, *polished)
            if polished_residual < best_residual:
                best_residual, (x, y_eq, y_in) = polished_residual, polished
    if status is not QpStatus.OPTIMAL and best_residual <= tol:
        status = QpStatus.OPTIMAL
    if status is not QpStatus.OPTIMAL and _primal_infeasibility(qp, x) > infeasible_threshold:
        status = QpStatus.INFEASIBLE
    if status is QpStatus.MAX_ITER:
        logger.warning(f"QP stopped after {iteration} iterations with KKT residual {best_residual:.3e}")
    return QpSolution(x, y_eq, y_in, status, float(best_residual), iteration)


def _polish(qp: SparseQp, x: np.ndarray, y_in: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Re-solve on the active set guessed from an interior point iterate.

    The primal comes from a least-squares solve of the equality-constrained
    KKT system; the multipliers from a nonnegative least-squares fit of the
    stationarity condition, so degenerate vertices still get y_in >= 0.
    """
    n, m_e = qp.n, qp.b_eq.size
    slack = qp.A_in @ x + qp.b_in
    active = np.flatnonzero(slack <= np.maximum(y_in, 0.0))
    H = qp.H.toarray()
    A_eq = qp.A_eq.toarray()
    A_act = qp.A_in.toarray()[active]
    m_a = active.size
    K = np.block(
        [
            [H, A_eq.T, -A_act.T],
            [A_eq, np.zeros((m_e, m_e + m_a))],
            [A_act, np.zeros((m_a, m_e + m_a))],
        ]
    )
    rhs = np.concatenate([-qp.grad, qp.b_eq, -qp.b_in[active]])
    try:
        x_p = np.linalg.lstsq(K, rhs, rcond=None)[0][:n]
        target = -(H @ x_p + qp.grad)
        columns = np.hstack([A_eq.T, -A_eq.T, -A_act.T])
        if columns.shape[1]:
            coef = nnls(columns, target)[0]
        else:
            coef = np.zeros(0)
    except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
        logger.debug(f"QP polish failed: {exc}")
        return None
    y_eq = coef[:m_e] - coef[m_e : 2 * m_e]
    y_full = np.zeros(qp.b_in.size)
    y_full[active] = coef[2 * m_e :]
    return x_p, y_eq, y_full


def elastic_qp(qp: SparseQp, penalty: float) -> SparseQp:
    """l1-elastic version of `qp`: every inequality row gets a slack e >= 0
    priced at `penalty` in the objective, so only the equalities can make it
    infeasible."""
    n, m_e, m_i = qp.n, qp.b_eq.size, qp.b_in.size
    eye = sp.eye(m_i, format="csc")
    return SparseQp(
        H=sp.block_diag([qp.H, sp.csc_matrix((m_i, m_i))], format="csc"),
        grad=np.concatenate([qp.grad, penalty * np.ones(m_i)]),
        A_eq=sp.hstack([qp.A_eq, sp.csc_matrix((m_e, m_i))], format="csc"),
        b_eq=qp.b_eq,
        A_in=sp.bmat([[qp.A_in, eye], [sp.csc_matrix((m_i, n)), eye]], format="csc"),
        b_in=np.concatenate([qp.b_in, np.zeros(m_i)]),
    )


def solve_elastic_qp(
    qp: SparseQp,
    penalty: float,
    tol: float = DEFAULT_QP_TOLERANCE,
    max_iter: int = 200,
) -> Tuple[QpSolution, np.ndarray]:
    """Solve the elastic QP; returns the solution in the original variables and the elastic slacks."""
    n, m_i = qp.n, qp.b_in.size
    sol = solve_sparse_qp(elastic_qp(qp, penalty), tol=tol, max_iter=max_iter)
    trimmed = QpSolution(
        primal=sol.primal[:n],
        eq_multipliers=sol.eq_multipliers,
        in_multipliers=sol.in_multipliers[:m_i],
        status=sol.status,
        kkt_residual=sol.kkt_residual,
        iterations=sol.iterations,
    )
    return trimmed, np.maximum(sol.primal[n:], 0.0)


def _independent_rows(G: np.ndarray, candidates: Sequence[int]) -> list:
    kept: list = []
    for idx in candidates:
        trial = kept + [idx]
        if np.linalg.matrix_rank(G[trial]) == len(trial):
            kept = trial
    return kept


def _equality_step(H: np.ndarray, grad: np.ndarray, G_w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Minimize 1/2 p^T H p + grad^T p subject to G_w p = 0; also return the working-set multipliers."""
    n, m = H.shape[0], G_w.shape[0]
    if m == 0:
        return np.linalg.solve(H, -grad), np.zeros(0)
    K = np.block([[H, -G_w.T], [G_w, np.zeros((m, m))]])
    sol = np.linalg.solve(K, np.concatenate([-grad, np.zeros(m)]))
    return sol[:n], sol[n:]


def _working_set_minimizer(H: np.ndarray, q: np.ndarray, G: np.ndarray, g: np.ndarray, working: list) -> np.ndarray:
    n, m = H.shape[0], len(working)
    if m == 0:
        return np.linalg.solve(H, -q)
    K = np.block([[H, -G[working].T], [G[working], np.zeros((m, m))]])
    return np.linalg.solve(K, np.concatenate([-q, -g[working]]))[:n]


def _primal_active_set(
    H: np.ndarray, q: np.ndarray, G: np.ndarray, g: np.ndarray, x: np.ndarray, working: list, max_pivots: int
):
    """Primal active-set iterations from a feasible x; None once max_pivots is exceeded."""
    x = x.copy()
    working = list(working)
    pivots = 0
    scale = 1.0 + np.abs(q).max(initial=0.0)
    while pivots <= max_pivots:
        p, multipliers = _equality_step(H, H @ x + q, G[working])
        if np.abs(p).max(initial=0.0) <= 1e-13 * (1.0 + np.abs(x).max(initial=0.0)):
            if not working or multipliers.min() >= -1e-12 * scale:
                return x, tuple(sorted(working))
            working.pop(int(np.argmin(multipliers)))
            pivots += 1
            continue
        Gp = G @ p
        slack = G @ x + g
        alpha, blocking = 1.0, None
        for i in np.flatnonzero(Gp < -1e-14):
            if i in working:
                continue
            ratio = max(slack[i], 0.0) / -Gp[i]
            if ratio < alpha:
                alpha, blocking = ratio, int(i)
        x = x + alpha * p
        if blocking is not None:
            working.append(blocking)
            pivots += 1
    return None


def solve_projection_qp(
    A: np.ndarray,
    c: float,
    lam: np.ndarray,
    eta: np.ndarray,
    vi_set: VISet,
    warm_active_set: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Maximize -(c/2) w^T A w - (eta - c A lam)^T w over {w | G w + g >= 0}.

    Returns the maximizer and its active set. A warm working set is tried
    first and abandoned after 3 n_g pivots in favour of a cold start from the
    feasible point found when the set was built.
    """
    G, g = vi_set.affine_rows()
    lam = np.asarray(lam, dtype=float).reshape(-1)
    eta = np.asarray(eta, dtype=float).reshape(-1)
    H = c * np.asarray(A, dtype=float)
    q = eta - H @ lam
    n_g = g.size
    if n_g == 0:
        return np.linalg.solve(H, -q), ()

    if warm_active_set:
        working = _independent_rows(G, sorted({int(i) for i in warm_active_set if 0 <= int(i) < n_g}))
        x_w = _working_set_minimizer(H, q, G, g, working)
        if np.all(G @ x_w + g >= -1e-12 * (1.0 + np.abs(g).max())):
            result = _primal_active_set(H, q, G, g, x_w, working, max_pivots=3 * n_g)
            if result is not None:
                return result
        logger.debug("warm working set rejected, projecting from a cold start")

    start = vi_set.feasible_point if vi_set.feasible_point is not None else np.zeros_like(q)
    if vi_set.kind == "box":
        start = np.clip(np.zeros_like(q), vi_set.lower, vi_set.upper)
    result = _primal_active_set(H, q, G, g, start, [], max_pivots=50 * (n_g + q.size))
    if result is None:
        raise ProjectionError("active-set projection did not converge")
    return result
