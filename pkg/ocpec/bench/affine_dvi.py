"""Affine DVI benchmark: x' = A x + B u + E lam, F = Fx x + Fu u + Fl lam, lam in [-1, 1]."""

from typing import Optional

import numpy as np

from ocpec.core.data_models import BenchmarkSpec, VISet
from ocpec.model.maps import AffineMap, QuadraticStageCost, QuadraticTerminalCost
from ocpec.model.ocpec_model import DiscretizedNlp, OcpecProblem

DYNAMICS_A = [[1.0, -3.0], [-8.0, 10.0]]
DYNAMICS_B = [[4.0], [8.0]]
DYNAMICS_E = [[-3.0], [-1.0]]
VI_FX = [[1.0, -3.0]]
VI_FU = [[3.0]]
VI_FL = [[5.0]]


def path_bounds(state_bound: float, control_bound: float) -> AffineMap:
    """G(x, u) = [x1 + b, b - x1, x2 + b, b - x2, u + b_u, b_u - u] >= 0."""
    Gx = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, 0.0], [0.0, 0.0]]
    Gu = [[0.0], [0.0], [0.0], [0.0], [1.0], [-1.0]]
    b = [state_bound] * 4 + [control_bound] * 2
    return AffineMap(Gx, Gu, None, b, name="G")


def build_affine_dvi(spec: Optional[BenchmarkSpec] = None) -> OcpecProblem:
    spec = spec or BenchmarkSpec()
    x0 = np.asarray(spec.x0, dtype=float)
    x_e = np.asarray(spec.x_e, dtype=float)
    if spec.x_ref_policy == "linear":
        T = spec.T

        def x_ref(t: float) -> np.ndarray:
            return x0 + (t / T) * (x_e - x0)

    else:
        x_ref = x_e

    return OcpecProblem(
        name=spec.problem_id,
        n_x=2,
        n_u=1,
        n_lambda=1,
        f=AffineMap(DYNAMICS_A, DYNAMICS_B, DYNAMICS_E, name="f"),
        F=AffineMap(VI_FX, VI_FU, VI_FL, name="F"),
        vi_set=VISet.box([-1.0], [1.0]),
        L_T=QuadraticTerminalCost(spec.Q_T, x_e),
        L_S=QuadraticStageCost(spec.Q_x, spec.Q_u, spec.Q_lam, x_ref),
        G=path_bounds(spec.state_bound, spec.control_bound),
        T=spec.T,
        x0=x0,
    )


def initial_guess(nlp: DiscretizedNlp, policy: str = "ones", seed: int = 0) -> np.ndarray:
    if policy == "ones":
        return np.ones(nlp.n_primal)
    if policy == "zeros":
        return np.zeros(nlp.n_primal)
    if policy == "random":
        return np.random.default_rng(seed).uniform(-1.0, 1.0, nlp.n_primal)
    raise ValueError(f"unknown initial guess policy {policy!r}")
