"""Filter line search on the pair (M, J): constraint violation and cost."""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, List, Tuple

import numpy as np

from ocpec.core.data_models import SgclConfig
from ocpec.core.errors import LineSearchFailure

logger = logging.getLogger(__name__)

TrialFn = Callable[[np.ndarray], Tuple[float, float, Any]]


@dataclass
class Filter:
    """Forbidden-region corners (M_f, J_f); a pair is rejected when it is no better in both."""

    max_violation: float
    min_violation: float
    entries: List[Tuple[float, float]] = field(default_factory=list)

    @classmethod
    def initial(cls, M0: float) -> "Filter":
        scale = max(1.0, M0)
        return cls(max_violation=1e4 * scale, min_violation=1e-4 * scale)

    def acceptable(self, M: float, J: float) -> bool:
        if not (np.isfinite(M) and np.isfinite(J)) or M > self.max_violation:
            return False
        return all(M < M_f or J < J_f for M_f, J_f in self.entries)

    def augment(self, M: float, J: float, config: SgclConfig) -> None:
        corner = ((1.0 - config.gamma_m) * M, J - config.gamma_j * M)
        self.entries = [e for e in self.entries if not (e[0] >= corner[0] and e[1] >= corner[1])]
        self.entries.append(corner)

    def is_non_dominated(self) -> bool:
        for i, a in enumerate(self.entries):
            for j, b in enumerate(self.entries):
                if i != j and a[0] <= b[0] and a[1] <= b[1]:
                    return False
        return True


@dataclass
class LineSearchResult:
    alpha: float
    z: np.ndarray
    M: float
    J: float
    payload: Any
    f_type: bool
    trials: int


def backtrack(
    z: np.ndarray,
    dz: np.ndarray,
    J_k: float,
    M_k: float,
    dphi: float,
    trial_fn: TrialFn,
    flt: Filter,
    config: SgclConfig,
) -> LineSearchResult:
    """Backtrack alpha in {1, beta, beta^2, ...} until the trial point is filter-acceptable.

    A step where the cost model predicts enough descent at small violation is
    an f-type step: it must satisfy Armijo and leaves the filter unchanged.
    Any other accepted step must reduce M or J against the current iterate
    by the configured margins and adds the current pair to the filter.
    """
    alpha = 1.0
    trials = 0
    while alpha >= config.alpha_min:
        trials += 1
        z_trial = z + alpha * dz
        M_t, J_t, payload = trial_fn(z_trial)
        if flt.acceptable(M_t, J_t):
            switching = (
                dphi < 0.0
                and M_k <= flt.min_violation
                and alpha * (-dphi) ** config.s_phi > config.delta_switch * M_k**config.s_theta
            )
            if switching:
                if J_t <= J_k + config.eta_armijo * alpha * dphi:
                    return LineSearchResult(alpha, z_trial, M_t, J_t, payload, True, trials)
            elif M_t <= (1.0 - config.gamma_m) * M_k or J_t <= J_k - config.gamma_j * M_k:
                flt.augment(M_k, J_k, config)
                return LineSearchResult(alpha, z_trial, M_t, J_t, payload, False, trials)
        alpha *= config.beta
    logger.warning(f"line search failed after {trials} trials (M={M_k:.3e}, J={J_k:.6e}, dphi={dphi:.3e})")
    raise LineSearchFailure(f"step size fell below alpha_min={config.alpha_min:g}")
