"""Regularized gap function phi^c(lam, eta) and its skewed projector.

    omega_hat = argmax_{omega in K} eta^T (lam - omega) - (c/2) (lam - omega)^T A (lam - omega)
    phi       = eta^T d - (c/2) d^T A d,   d = lam - omega_hat
    grad_lam  = eta - c A d,               grad_eta = d
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from ocpec.core.data_models import GapParams, VISet, as_vector
from ocpec.core.errors import ProjectionError
from ocpec.tools.qp_subsolver import solve_projection_qp

logger = logging.getLogger(__name__)

ProjectorPath = Literal["auto", "box", "polyhedral"]


def fingerprint(lam: np.ndarray, eta: np.ndarray) -> bytes:
    """Exact bit pattern of (lam, eta)."""
    return np.concatenate([np.asarray(lam, dtype=float).ravel(), np.asarray(eta, dtype=float).ravel()]).tobytes()


@dataclass
class GapEvaluation:
    lam: np.ndarray
    eta: np.ndarray
    omega_hat: np.ndarray
    phi: float
    grad_lambda: np.ndarray
    grad_eta: np.ndarray
    active_set: Tuple[int, ...]
    fingerprint: bytes

    def matches(self, lam: np.ndarray, eta: np.ndarray) -> bool:
        return self.fingerprint == fingerprint(lam, eta)


def select_projector_path(params: GapParams, vi_set: VISet, requested: ProjectorPath = "auto") -> str:
    box_ok = vi_set.kind == "box" and params.is_identity
    if requested == "auto":
        return "box" if box_ok else "polyhedral"
    if requested == "box" and not box_ok:
        raise ValueError("the box projector needs a box set and A = identity")
    return requested


def _check_finite(lam: np.ndarray, eta: np.ndarray) -> None:
    if not (np.isfinite(lam).all() and np.isfinite(eta).all()):
        raise ValueError("skewed projection needs finite lam and eta")


def _box_active_rows(omega: np.ndarray, vi_set: VISet) -> Tuple[int, ...]:
    lower_row, upper_row = vi_set.bound_rows()
    rows = [int(lower_row[i]) for i in np.flatnonzero(omega == vi_set.lower) if lower_row[i] >= 0]
    rows += [int(upper_row[i]) for i in np.flatnonzero(omega == vi_set.upper) if upper_row[i] >= 0]
    return tuple(sorted(rows))


def skewed_projector(
    lam,
    eta,
    params: GapParams,
    vi_set: VISet,
    warm_start: Optional[Sequence[int]] = None,
    path: ProjectorPath = "auto",
) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """omega_hat = Pi_{K,A}(lam - A^{-1} eta / c) together with its active rows of g."""
    lam, eta = as_vector(lam), as_vector(eta)
    _check_finite(lam, eta)
    if select_projector_path(params, vi_set, path) == "box":
        omega = np.minimum(np.maximum(vi_set.lower, lam - eta / params.c), vi_set.upper)
        return omega, _box_active_rows(omega, vi_set)
    return solve_projection_qp(params.A, params.c, lam, eta, vi_set, warm_start)


def gap_value(lam, eta, omega_hat, params: GapParams) -> float:
    lam, eta, omega_hat = as_vector(lam), as_vector(eta), as_vector(omega_hat)
    d = lam - omega_hat
    if np.isnan(d).any() or np.isnan(eta).any():
        raise ValueError("gap value needs NaN-free inputs")
    return float(eta @ d - 0.5 * params.c * (d @ (params.A @ d)))


def gap_gradients(lam, eta, omega_hat, params: GapParams) -> Tuple[np.ndarray, np.ndarray]:
    d = as_vector(lam) - as_vector(omega_hat)
    return as_vector(eta) - params.c * (params.A @ d), d


def evaluate_gap(
    lam,
    eta,
    params: GapParams,
    vi_set: VISet,
    warm_start: Optional[Sequence[int]] = None,
    path: ProjectorPath = "auto",
) -> GapEvaluation:
    lam, eta = as_vector(lam).copy(), as_vector(eta).copy()
    omega, active = skewed_projector(lam, eta, params, vi_set, warm_start, path)
    return _assemble(lam, eta, omega, active, params)


def _assemble(lam, eta, omega, active, params: GapParams) -> GapEvaluation:
    grad_lam, grad_eta = gap_gradients(lam, eta, omega, params)
    return GapEvaluation(
        lam=lam,
        eta=eta,
        omega_hat=omega,
        phi=gap_value(lam, eta, omega, params),
        grad_lambda=grad_lam,
        grad_eta=grad_eta,
        active_set=tuple(active),
        fingerprint=fingerprint(lam, eta),
    )


def closed_form_branch(lam: float, eta: float, c: float, b_l: float, b_u: float) -> int:
    """1 when lam - eta/c hits the lower bound, 3 for the upper bound, 2 in between."""
    t = lam - eta / c
    if t <= b_l:
        return 1
    if t >= b_u:
        return 3
    return 2


def scalar_gap_closed_form(lam: float, eta: float, c: float, b_l: float, b_u: float) -> float:
    """Piecewise phi^c for a scalar box [b_l, b_u] with A = 1."""
    branch = closed_form_branch(lam, eta, c, b_l, b_u)
    if branch == 2:
        return eta**2 / (2.0 * c)
    bound = b_l if branch == 1 else b_u
    return eta * (lam - bound) - 0.5 * c * (lam - bound) ** 2


class GapEvaluator:
    """Stage-wise omega_hat evaluation for one NLP.

    Serial mode owns a single warm-start cache: stage n is seeded by stage
    n-1 from the same sweep (stage 0 by its own last result). Parallel mode
    seeds each stage only with its own previous active set, so the workers
    never read each other's state.
    """

    def __init__(
        self,
        params: GapParams,
        vi_set: VISet,
        projector_path: ProjectorPath = "auto",
        parallel: bool = False,
        workers: Optional[int] = None,
    ):
        self.params = params
        self.vi_set = vi_set
        self.path = select_projector_path(params, vi_set, projector_path)
        self.parallel = parallel
        self.workers = workers
        self._warm: Dict[int, Tuple[int, ...]] = {}

    def evaluate(self, lam_stages: np.ndarray, eta_stages: np.ndarray) -> List[GapEvaluation]:
        lam_stages = np.atleast_2d(np.asarray(lam_stages, dtype=float))
        eta_stages = np.atleast_2d(np.asarray(eta_stages, dtype=float))
        if self.path == "box":
            evals = self._evaluate_box(lam_stages, eta_stages)
        elif self.parallel:
            evals = self._evaluate_parallel(lam_stages, eta_stages)
        else:
            evals = self._evaluate_serial(lam_stages, eta_stages)
        self._warm = {n: ev.active_set for n, ev in enumerate(evals)}
        return evals

    def _evaluate_box(self, lam_stages, eta_stages) -> List[GapEvaluation]:
        if not (np.isfinite(lam_stages).all() and np.isfinite(eta_stages).all()):
            bad = int(np.flatnonzero(~(np.isfinite(lam_stages).all(1) & np.isfinite(eta_stages).all(1)))[0])
            raise ProjectionError("non-finite lam or eta", stage=bad)
        omegas = np.minimum(np.maximum(self.vi_set.lower, lam_stages - eta_stages / self.params.c), self.vi_set.upper)
        return [
            _assemble(lam_stages[n].copy(), eta_stages[n].copy(), omegas[n], _box_active_rows(omegas[n], self.vi_set), self.params)
            for n in range(lam_stages.shape[0])
        ]

    def _evaluate_stage(self, n: int, lam, eta, warm) -> GapEvaluation:
        try:
            return evaluate_gap(lam, eta, self.params, self.vi_set, warm, self.path)
        except (ProjectionError, ValueError, np.linalg.LinAlgError) as exc:
            raise ProjectionError(str(exc), stage=n) from exc

    def _evaluate_serial(self, lam_stages, eta_stages) -> List[GapEvaluation]:
        evals: List[GapEvaluation] = []
        for n in range(lam_stages.shape[0]):
            warm = evals[-1].active_set if evals else self._warm.get(0)
            evals.append(self._evaluate_stage(n, lam_stages[n], eta_stages[n], warm))
        return evals

    def _evaluate_parallel(self, lam_stages, eta_stages) -> List[GapEvaluation]:
        n_stages = lam_stages.shape[0]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futures = [
                pool.submit(self._evaluate_stage, n, lam_stages[n], eta_stages[n], self._warm.get(n))
                for n in range(n_stages)
            ]
            return [f.result() for f in futures]
