"""Continuous OCPEC description and its implicit-Euler, gap-constrained NLP.

Stage n carries z_n = [x_n; u_n; lam_n; eta_n; v_n] and contributes

    h_n = [x_{n-1} + f(x_n, u_n, lam_n) dt - x_n;  C(x_n, u_n);  F(x_n, u_n, lam_n) - eta_n;  phi^c(lam_n, eta_n) - v_n]
    c_n = [G(x_n, u_n);  g(lam_n);  s - v_n]

with cost J = L_T(x_N) + sum_n (L_S(t_n, x_n, u_n, lam_n) dt + mu dt v_n^2).
"""

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ocpec.core.data_models import GapParams, GapSettings, VISet, as_matrix, as_vector
from ocpec.core.errors import ModelError, StaleGapEvaluationError
from ocpec.model.maps import (
    AffineMap,
    QuadraticStageCost,
    QuadraticTerminalCost,
    check_map_dims,
    check_quadratic_cost,
)
from ocpec.tools.gap_function import GapEvaluation, fingerprint
from ocpec.tools.vi_core import natural_residual

logger = logging.getLogger(__name__)

DEFAULT_HESSIAN_REGULARIZATION = 1e-8


class OcpecProblem(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str = "ocpec"
    n_x: int = Field(ge=1)
    n_u: int = Field(ge=0)
    n_lambda: int = Field(ge=1)
    f: Any
    F: Any
    vi_set: VISet
    L_T: Any
    L_S: Any
    G: Optional[Any] = None
    C: Optional[Any] = None
    T: float = Field(gt=0.0)
    x0: np.ndarray

    @field_validator("x0", mode="before")
    @classmethod
    def _coerce_x0(cls, value):
        return as_vector(value)

    @model_validator(mode="after")
    def check_dimensions(self) -> "OcpecProblem":
        if self.x0.size != self.n_x:
            raise ValueError(f"x0 has {self.x0.size} entries but n_x={self.n_x}")
        if self.vi_set.n_lambda != self.n_lambda:
            raise ValueError(f"VI set lives in R^{self.vi_set.n_lambda} but n_lambda={self.n_lambda}")
        return self

    @property
    def n_G(self) -> int:
        return 0 if self.G is None else self.G.out_dim

    @property
    def n_C(self) -> int:
        return 0 if self.C is None else self.C.out_dim


@dataclass
class Trajectory:
    t: np.ndarray  # N+1 nodes, t[0] = 0
    x: np.ndarray  # (N+1, n_x), x[0] = x0
    u: np.ndarray  # (N, n_u)
    lam: np.ndarray
    eta: np.ndarray
    v: np.ndarray

    @property
    def N(self) -> int:
        return self.u.shape[0]


@dataclass(frozen=True)
class DiscretizedNlp:
    problem: OcpecProblem
    N: int
    s: float
    mu: float
    gap_params: GapParams
    hessian_regularization: float = DEFAULT_HESSIAN_REGULARIZATION

    @property
    def dt(self) -> float:
        return self.problem.T / self.N

    @property
    def n_x(self) -> int:
        return self.problem.n_x

    @property
    def n_u(self) -> int:
        return self.problem.n_u

    @property
    def n_lambda(self) -> int:
        return self.problem.n_lambda

    @property
    def n_g(self) -> int:
        return self.problem.vi_set.n_g

    @property
    def n_z(self) -> int:
        return self.n_x + self.n_u + 2 * self.n_lambda + 1

    @property
    def n_h_stage(self) -> int:
        return self.n_x + self.problem.n_C + self.n_lambda + 1

    @property
    def n_c_stage(self) -> int:
        return self.problem.n_G + self.n_g + 1

    @property
    def n_primal(self) -> int:
        return self.N * self.n_z

    @property
    def n_eq(self) -> int:
        return self.N * self.n_h_stage

    @property
    def n_in(self) -> int:
        return self.N * self.n_c_stage

    @cached_property
    def slices(self) -> Dict[str, slice]:
        """Column slices of x, u, lam, eta, v inside one stage block."""
        bounds = np.cumsum([0, self.n_x, self.n_u, self.n_lambda, self.n_lambda, 1])
        return {key: slice(int(bounds[i]), int(bounds[i + 1])) for i, key in enumerate(("x", "u", "lam", "eta", "v"))}

    @cached_property
    def time_grid(self) -> np.ndarray:
        return self.dt * np.arange(1, self.N + 1)

    def stages(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float).reshape(self.N, self.n_z)

    def stage_gap_inputs(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        Z = self.stages(z)
        return Z[:, self.slices["lam"]], Z[:, self.slices["eta"]]

    def with_relaxation(self, s: float) -> "DiscretizedNlp":
        if s < 0:
            raise ValueError(f"relaxation s must be nonnegative, got {s}")
        nlp = replace(self, s=float(s))
        if "hessian" in self.__dict__:
            nlp.__dict__["hessian"] = self.__dict__["hessian"]
        return nlp

    @cached_property
    def primal_stage(self) -> np.ndarray:
        return np.repeat(np.arange(self.N), self.n_z)

    @cached_property
    def eq_stage(self) -> np.ndarray:
        return np.repeat(np.arange(self.N), self.n_h_stage)

    @cached_property
    def hessian(self) -> sp.csc_matrix:
        return _assemble_hessian(self)


def discretize(
    problem: OcpecProblem,
    N: int,
    s: float,
    mu: float,
    gap_params: GapParams,
    hessian_regularization: float = DEFAULT_HESSIAN_REGULARIZATION,
) -> DiscretizedNlp:
    if N < 1:
        raise ModelError(f"N must be >= 1, got {N}")
    if s < 0:
        raise ModelError(f"s must be >= 0, got {s}")
    if mu <= 0:
        raise ModelError(f"mu must be > 0, got {mu}")
    if gap_params.A.shape != (problem.n_lambda, problem.n_lambda):
        raise ModelError(f"gap metric A has shape {gap_params.A.shape}, expected n_lambda={problem.n_lambda}")
    dims = (problem.n_x, problem.n_u, problem.n_lambda)
    check_map_dims(problem.f, *dims, expected_out=problem.n_x)
    check_map_dims(problem.F, *dims, expected_out=problem.n_lambda)
    for m in (problem.G, problem.C):
        if m is not None:
            check_map_dims(m, *dims)
    rng = np.random.default_rng(0)
    check_quadratic_cost(problem.L_T, (problem.n_x,), rng)
    check_quadratic_cost(problem.L_S, dims, rng)
    nlp = DiscretizedNlp(problem, int(N), float(s), float(mu), gap_params, float(hessian_regularization))
    logger.debug(
        f"discretized '{problem.name}': N={N}, dt={nlp.dt:g}, n_z={nlp.n_z}, "
        f"n_h={nlp.n_eq}, n_c={nlp.n_in}"
    )
    return nlp


def check_gap_evals(nlp: DiscretizedNlp, z: np.ndarray, gap_evals: Sequence[GapEvaluation]) -> None:
    if len(gap_evals) != nlp.N:
        raise StaleGapEvaluationError(min(len(gap_evals), nlp.N - 1))
    lam, eta = nlp.stage_gap_inputs(z)
    for n, ev in enumerate(gap_evals):
        if ev.fingerprint != fingerprint(lam[n], eta[n]):
            raise StaleGapEvaluationError(n)


def _stage_values(nlp: DiscretizedNlp, n: int, Z: np.ndarray):
    sl = nlp.slices
    return Z[n, sl["x"]], Z[n, sl["u"]], Z[n, sl["lam"]], Z[n, sl["eta"]], Z[n, sl["v"]][0]


def eval_constraints(nlp: DiscretizedNlp, z: np.ndarray, gap_evals: Sequence[GapEvaluation]):
    """(h, c) stacked stage by stage; gap rows use the supplied evaluations."""
    check_gap_evals(nlp, z, gap_evals)
    p, Z, dt = nlp.problem, nlp.stages(z), nlp.dt
    h_blocks: List[np.ndarray] = []
    c_blocks: List[np.ndarray] = []
    x_prev = p.x0
    for n in range(nlp.N):
        x, u, lam, eta, v = _stage_values(nlp, n, Z)
        h_parts = [x_prev + p.f(x, u, lam) * dt - x]
        if p.C is not None:
            h_parts.append(p.C(x, u, lam))
        h_parts += [p.F(x, u, lam) - eta, np.array([gap_evals[n].phi - v])]
        h_blocks.append(np.concatenate(h_parts))

        c_parts = [] if p.G is None else [p.G(x, u, lam)]
        c_parts += [p.vi_set.g(lam), np.array([nlp.s - v])]
        c_blocks.append(np.concatenate(c_parts))
        x_prev = x
    return np.concatenate(h_blocks), np.concatenate(c_blocks)


def eval_jacobians(nlp: DiscretizedNlp, z: np.ndarray, gap_evals: Sequence[GapEvaluation]):
    """Exact sparse Jacobians of h and c; h couples stage n to x_{n-1} through an identity."""
    check_gap_evals(nlp, z, gap_evals)
    p, Z, dt, sl = nlp.problem, nlp.stages(z), nlp.dt, nlp.slices
    n_x, n_lam, n_z = nlp.n_x, nlp.n_lambda, nlp.n_z
    G_aff, _ = p.vi_set.affine_rows()

    h_diag, c_diag = [], []
    for n in range(nlp.N):
        x, u, lam, _, _ = _stage_values(nlp, n, Z)
        rows = []

        fx, fu, fl = p.f.jacobian(x, u, lam)
        dyn = np.zeros((n_x, n_z))
        dyn[:, sl["x"]] = fx * dt - np.eye(n_x)
        dyn[:, sl["u"]] = fu * dt
        dyn[:, sl["lam"]] = fl * dt
        rows.append(dyn)

        if p.C is not None:
            Cx, Cu, Cl = p.C.jacobian(x, u, lam)
            eq = np.zeros((p.n_C, n_z))
            eq[:, sl["x"]], eq[:, sl["u"]], eq[:, sl["lam"]] = Cx, Cu, Cl
            rows.append(eq)

        Fx, Fu, Fl = p.F.jacobian(x, u, lam)
        vi = np.zeros((n_lam, n_z))
        vi[:, sl["x"]], vi[:, sl["u"]], vi[:, sl["lam"]] = Fx, Fu, Fl
        vi[:, sl["eta"]] = -np.eye(n_lam)
        rows.append(vi)

        gap = np.zeros((1, n_z))
        gap[0, sl["lam"]] = gap_evals[n].grad_lambda
        gap[0, sl["eta"]] = gap_evals[n].grad_eta
        gap[0, sl["v"]] = -1.0
        rows.append(gap)
        h_diag.append(np.vstack(rows))

        ineq = np.zeros((nlp.n_c_stage, n_z))
        offset = 0
        if p.G is not None:
            Gx, Gu, Gl = p.G.jacobian(x, u, lam)
            ineq[: p.n_G, sl["x"]], ineq[: p.n_G, sl["u"]], ineq[: p.n_G, sl["lam"]] = Gx, Gu, Gl
            offset = p.n_G
        ineq[offset : offset + nlp.n_g, sl["lam"]] = G_aff
        ineq[-1, sl["v"]] = -1.0
        c_diag.append(ineq)

    coupling = np.zeros((nlp.n_h_stage, n_z))
    coupling[:n_x, sl["x"]] = np.eye(n_x)
    Jh = sp.block_diag(h_diag, format="csr") + sp.kron(sp.eye(nlp.N, k=-1), sp.csr_matrix(coupling), format="csr")
    Jc = sp.block_diag(c_diag, format="csr")
    return Jh.tocsc(), Jc.tocsc()


def eval_cost(nlp: DiscretizedNlp, z: np.ndarray) -> Tuple[float, np.ndarray]:
    p, Z, dt, sl = nlp.problem, nlp.stages(z), nlp.dt, nlp.slices
    grad = np.zeros_like(Z)
    J = 0.0
    for n in range(nlp.N):
        x, u, lam, _, v = _stage_values(nlp, n, Z)
        t = nlp.time_grid[n]
        J += p.L_S.value(t, x, u, lam) * dt + nlp.mu * dt * v**2
        gx, gu, gl = p.L_S.gradient(t, x, u, lam)
        grad[n, sl["x"]] = gx * dt
        grad[n, sl["u"]] = gu * dt
        grad[n, sl["lam"]] = gl * dt
        grad[n, sl["v"]] = 2.0 * nlp.mu * dt * v
    x_N = Z[-1, sl["x"]]
    J += p.L_T.value(x_N)
    grad[-1, sl["x"]] += p.L_T.gradient(x_N)
    return float(J), grad.reshape(-1)


def _assemble_hessian(nlp: DiscretizedNlp) -> sp.csc_matrix:
    p, dt, sl = nlp.problem, nlp.dt, nlp.slices
    if not (getattr(p.L_T, "quadratic", False) and getattr(p.L_S, "quadratic", False)):
        raise ModelError("Gauss-Newton Hessian needs L_T and L_S declared convex quadratic")
    stage = np.zeros((nlp.n_z, nlp.n_z))
    n_xul = nlp.n_x + nlp.n_u + nlp.n_lambda
    stage[:n_xul, :n_xul] = p.L_S.hessian() * dt
    stage[sl["v"], sl["v"]] = 2.0 * nlp.mu * dt
    terminal = stage.copy()
    terminal[sl["x"], sl["x"]] += p.L_T.hessian()
    blocks = [stage] * (nlp.N - 1) + [terminal]
    H = sp.block_diag(blocks, format="csc") + nlp.hessian_regularization * sp.eye(nlp.n_primal, format="csc")
    return H.tocsc()


def gauss_newton_hessian(nlp: DiscretizedNlp, z: Optional[np.ndarray] = None) -> sp.csc_matrix:
    """Exact (constant) cost Hessian plus hessian_regularization on the diagonal."""
    return nlp.hessian


######
def trajectory_from_z(nlp: DiscretizedNlp, z: np.ndarray) -> Trajectory:
    Z, sl = nlp.stages(z), nlp.slices
    return Trajectory(
        t=np.concatenate([[0.0], nlp.time_grid]),
        x=np.vstack([nlp.problem.x0, Z[:, sl["x"]]]),
        u=Z[:, sl["u"]].copy(),
        lam=Z[:, sl["lam"]].copy(),
        eta=Z[:, sl["eta"]].copy(),
        v=Z[:, sl["v"]][:, 0].copy(),
    )


def z_from_trajectory(nlp: DiscretizedNlp, traj: Trajectory) -> np.ndarray:
    Z = np.hstack([traj.x[1:], traj.u, traj.lam, traj.eta, traj.v.reshape(-1, 1)])
    if Z.shape != (nlp.N, nlp.n_z):
        raise ModelError(f"trajectory has stage shape {Z.shape}, expected {(nlp.N, nlp.n_z)}")
    return Z.reshape(-1)


def stage_natural_residuals(problem: OcpecProblem, traj: Trajectory) -> np.ndarray:
    """Phi_n = lam_n - Pi_K(lam_n - F(x_n, u_n, lam_n)) for every stage, one row per stage."""
    return np.vstack(
        [
            natural_residual(traj.lam[n], problem.F(traj.x[n + 1], traj.u[n], traj.lam[n]), problem.vi_set)
            for n in range(traj.N)
        ]
    )


######
def _affine_from_tree(tree: Dict[str, Any], n_x: int, n_u: int, name: str, n_lambda: Optional[int] = None) -> AffineMap:
    Ax = as_matrix(tree.get("Ax", np.zeros((0, n_x))))
    Au = as_matrix(tree["Au"]) if "Au" in tree else np.zeros((Ax.shape[0], n_u))
    Al = as_matrix(tree["Al"]) if "Al" in tree else None
    if Al is None and n_lambda is not None:
        Al = np.zeros((Ax.shape[0], n_lambda))
    return AffineMap(Ax, Au.reshape(Ax.shape[0], n_u), Al, tree.get("b"), name=name)


def _vi_set_from_tree(tree: Dict[str, Any]) -> VISet:
    if tree.get("kind", "box") == "box":
        return VISet.box([float(b) for b in tree["lower"]], [float(b) for b in tree["upper"]])
    return VISet.polyhedral(tree["G"], tree["g"])


def load_problem(tree: Dict[str, Any]) -> Tuple[OcpecProblem, GapParams]:
    """Build an affine-dynamics, quadratic-cost problem from a config tree.

    Expected keys: n_x, n_u, n_lambda, T, x0, dynamics/vi_map {Ax, Au, Al, b},
    vi_set {kind, lower, upper | G, g}, cost {Q_T, Q_x, Q_u, Q_lam, x_e},
    optional path_inequality/path_equality {Ax, Au, b} and gap {c, A}.
    """
    try:
        n_x, n_u, n_lam = int(tree["n_x"]), int(tree["n_u"]), int(tree["n_lambda"])
        cost = tree["cost"]
        x_e = as_vector(cost.get("x_e", np.zeros(n_x)))
        problem = OcpecProblem(
            name=tree.get("name", "ocpec"),
            n_x=n_x,
            n_u=n_u,
            n_lambda=n_lam,
            f=_affine_from_tree(tree["dynamics"], n_x, n_u, "f", n_lam),
            F=_affine_from_tree(tree["vi_map"], n_x, n_u, "F", n_lam),
            vi_set=_vi_set_from_tree(tree["vi_set"]),
            L_T=QuadraticTerminalCost(cost["Q_T"], x_e),
            L_S=QuadraticStageCost(cost["Q_x"], cost["Q_u"], cost["Q_lam"], x_e),
            G=_affine_from_tree(tree["path_inequality"], n_x, n_u, "G") if "path_inequality" in tree else None,
            C=_affine_from_tree(tree["path_equality"], n_x, n_u, "C") if "path_equality" in tree else None,
            T=float(tree["T"]),
            x0=tree["x0"],
        )
        gap_params = GapSettings(**tree.get("gap", {})).to_params(n_lam)
    except KeyError as exc:
        raise ModelError(f"problem tree is missing key {exc}") from exc
    except ValidationError as exc:
        raise ModelError(f"problem tree is invalid: {exc}") from exc
    return problem, gap_params
