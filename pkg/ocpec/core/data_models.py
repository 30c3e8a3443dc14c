import logging
from functools import cached_property
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.optimize import linprog

from ocpec.core.errors import OracleError

logger = logging.getLogger(__name__)


def as_vector(value) -> np.ndarray:
    """Coerce lists, scalars and "inf"/"-inf" strings to a 1-D float array."""
    return np.atleast_1d(np.asarray(value, dtype=float)).reshape(-1)


def as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return arr


######
class VISet(BaseModel):
    """Closed convex set K, either a box or {lam | G_mat lam + g_vec >= 0}."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: Literal["box", "polyhedral"]
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    G_mat: Optional[np.ndarray] = None
    g_vec: Optional[np.ndarray] = None
    feasible_point: Optional[np.ndarray] = None

    @field_validator("lower", "upper", "g_vec", "feasible_point", mode="before")
    @classmethod
    def _coerce_vector(cls, value):
        return None if value is None else as_vector(value)

    @field_validator("G_mat", mode="before")
    @classmethod
    def _coerce_matrix(cls, value):
        return None if value is None else as_matrix(value)

    @model_validator(mode="after")
    def check_representation(self) -> "VISet":
        if self.kind == "box":
            if self.lower is None or self.upper is None:
                raise ValueError("box set needs both lower and upper bounds")
            if self.lower.shape != self.upper.shape:
                raise ValueError(f"bound shapes differ: {self.lower.shape} vs {self.upper.shape}")
            if np.isnan(self.lower).any() or np.isnan(self.upper).any():
                raise ValueError("box bounds contain NaN")
            if not np.all(self.lower < self.upper):
                raise ValueError("box bounds must satisfy lower < upper element-wise")
            return self

        if self.G_mat is None or self.g_vec is None:
            raise ValueError("polyhedral set needs G_mat and g_vec")
        if self.G_mat.shape[0] != self.g_vec.size:
            raise ValueError(f"G_mat has {self.G_mat.shape[0]} rows but g_vec has {self.g_vec.size} entries")
        if not (np.isfinite(self.G_mat).all() and np.isfinite(self.g_vec).all()):
            raise ValueError("polyhedral data must be finite")
        if self.feasible_point is None:
            n = self.G_mat.shape[1]
            # G lam + g >= 0  <=>  -G lam <= g
            res = linprog(np.zeros(n), A_ub=-self.G_mat, b_ub=self.g_vec, bounds=[(None, None)] * n, method="highs")
            if res.status != 0:
                raise ValueError(f"polyhedral set is empty (linprog status {res.status}: {res.message})")
            self.feasible_point = np.asarray(res.x, dtype=float)
        return self

    @classmethod
    def box(cls, lower, upper) -> "VISet":
        return cls(kind="box", lower=lower, upper=upper)

    @classmethod
    def polyhedral(cls, G_mat, g_vec) -> "VISet":
        return cls(kind="polyhedral", G_mat=G_mat, g_vec=g_vec)

    @property
    def n_lambda(self) -> int:
        if self.kind == "box":
            return int(self.lower.size)
        return int(self.G_mat.shape[1])

    @cached_property
    def row_data(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        if self.kind == "polyhedral":
            return self.G_mat, self.g_vec, -np.ones(0, dtype=int), -np.ones(0, dtype=int)
        n = self.lower.size
        eye = np.eye(n)
        finite_lo = np.flatnonzero(np.isfinite(self.lower))
        finite_hi = np.flatnonzero(np.isfinite(self.upper))
        # lower rows first (lam_i - l_i >= 0), then upper rows (u_i - lam_i >= 0)
        G = np.vstack([eye[finite_lo], -eye[finite_hi]]).reshape(-1, n)
        g = np.concatenate([-self.lower[finite_lo], self.upper[finite_hi]])
        lower_row = -np.ones(n, dtype=int)
        upper_row = -np.ones(n, dtype=int)
        lower_row[finite_lo] = np.arange(finite_lo.size)
        upper_row[finite_hi] = finite_lo.size + np.arange(finite_hi.size)
        return G, g, lower_row, upper_row

    def affine_rows(self) -> Tuple[np.ndarray, np.ndarray]:
        """(G, g) with K = {lam | G lam + g >= 0}; infinite box bounds are dropped."""
        G, g, _, _ = self.row_data
        return G, g

    def bound_rows(self) -> Tuple[np.ndarray, np.ndarray]:
        """Row index of each coordinate's lower/upper bound in affine_rows (-1 if infinite)."""
        if self.kind != "box":
            raise ValueError("bound rows exist only for box sets")
        _, _, lower_row, upper_row = self.row_data
        return lower_row, upper_row

    @property
    def n_g(self) -> int:
        return int(self.affine_rows()[1].size)

    def g(self, lam: np.ndarray) -> np.ndarray:
        G, g = self.affine_rows()
        return G @ np.asarray(lam, dtype=float) + g

    def contains(self, lam: np.ndarray, tol: float = 1e-12) -> bool:
        return bool(np.all(self.g(lam) >= -tol))

    def contains_many(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        G, g = self.affine_rows()
        if g.size == 0:
            return np.ones(points.shape[0], dtype=bool)
        return np.all(points @ G.T + g >= -tol, axis=1)

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.kind == "box":
            if not (np.isfinite(self.lower).all() and np.isfinite(self.upper).all()):
                raise OracleError("brute-force search needs a bounded set K")
            return self.lower.copy(), self.upper.copy()
        n = self.n_lambda
        lo, hi = np.empty(n), np.empty(n)
        for i in range(n):
            for sign, out in ((1.0, lo), (-1.0, hi)):
                cost = np.zeros(n)
                cost[i] = sign
                res = linprog(cost, A_ub=-self.G_mat, b_ub=self.g_vec, bounds=[(None, None)] * n, method="highs")
                if res.status != 0:
                    raise OracleError(f"brute-force search needs a bounded set K (coordinate {i} unbounded)")
                out[i] = res.x[i]
        return lo, hi


class VIInstance(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    vi_set: VISet
    F: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def evaluate(self, lam: np.ndarray) -> np.ndarray:
        value = as_vector(self.F(np.asarray(lam, dtype=float)))
        if value.size != self.vi_set.n_lambda:
            raise ValueError(f"F returned {value.size} entries, expected {self.vi_set.n_lambda}")
        return value


class GapParams(BaseModel):
    """Regularization scalar c and metric A of the regularized gap function."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    c: float = Field(1.0, gt=0.0)
    A: np.ndarray
    A_inv: Optional[np.ndarray] = None

    @field_validator("A", "A_inv", mode="before")
    @classmethod
    def _coerce(cls, value):
        return None if value is None else as_matrix(value)

    @model_validator(mode="after")
    def check_metric(self) -> "GapParams":
        A = self.A
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise ValueError("A must be symmetric")
        min_eig = float(np.linalg.eigvalsh(A).min())
        if min_eig <= 0.0:
            raise ValueError(f"A must be positive definite (min eigenvalue {min_eig:.3e})")
        self.A_inv = np.linalg.inv(A)
        if np.abs(A @ self.A_inv - np.eye(A.shape[0])).max() > 1e-10:
            raise ValueError("A is too ill-conditioned to invert to 1e-10")
        return self

    @classmethod
    def identity(cls, n_lambda: int, c: float = 1.0) -> "GapParams":
        return cls(c=c, A=np.eye(n_lambda))

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.A, np.eye(self.A.shape[0])))


class GapSettings(BaseModel):
    """Config-tree form of GapParams; A defaults to the identity."""

    c: float = Field(1.0, gt=0.0)
    A: Optional[List[List[float]]] = None

    def to_params(self, n_lambda: int) -> GapParams:
        if self.A is None:
            return GapParams.identity(n_lambda, c=self.c)
        return GapParams(c=self.c, A=self.A)


######
class SgclConfig(BaseModel):
    mu: float = Field(100.0, gt=0.0, description="Penalty weight on the gap slack v")
    eps_kkt: float = Field(1e-5, gt=0.0)
    eps_sd: float = Field(1e-8, gt=0.0)
    eps_p: float = Field(1e-8, gt=0.0)
    eps_d: float = Field(1e-4, gt=0.0)
    eps_c: float = Field(1e-8, gt=0.0)
    k_max: int = Field(500, ge=1)
    s_max: float = Field(100.0, ge=1.0, description="Multiplier scaling threshold for E_d and E_c")

    # filter line search
    beta: float = Field(0.5, gt=0.0, lt=1.0, description="Backtracking factor")
    gamma_m: float = Field(1e-5, gt=0.0, lt=1.0)
    gamma_j: float = Field(1e-5, gt=0.0, lt=1.0)
    alpha_min: float = Field(1e-8, gt=0.0)
    eta_armijo: float = Field(1e-4, gt=0.0, lt=0.5)
    s_theta: float = 1.1
    s_phi: float = 2.3
    delta_switch: float = 1.0

    # continuation
    s0: float = Field(1e-1, ge=0.0)
    s_final: float = Field(1e-6, ge=0.0)
    kappa_t: float = 0.8
    kappa_e: float = 1.5

    # subproblems
    qp_tolerance: float = Field(1e-9, gt=0.0)
    qp_max_iter: int = Field(200, ge=1)
    elastic_penalty: float = Field(
        1e3, gt=0.0, description="Price of the l1 slacks when a linearization has no feasible step"
    )
    hessian_regularization: float = Field(1e-8, gt=0.0)
    projector_path: Literal["auto", "box", "polyhedral"] = "auto"
    parallel_projection: bool = False
    projection_workers: Optional[int] = None

    @model_validator(mode="after")
    def check_continuation(self) -> "SgclConfig":
        if not 0.0 < self.kappa_t < 1.0:
            raise ValueError(f"kappa_t must lie in (0, 1), got {self.kappa_t}")
        if self.kappa_e <= 1.0:
            raise ValueError(f"kappa_e must exceed 1, got {self.kappa_e}")
        if self.s_final > self.s0:
            raise ValueError(f"s_final={self.s_final} exceeds s0={self.s0}")
        return self


class BenchmarkSpec(BaseModel):
    problem_id: Literal["affine_dvi"] = "affine_dvi"
    N: int = Field(100, ge=1)
    T: float = Field(1.0, gt=0.0)
    Q_T: List[List[float]] = Field(default_factory=lambda: [[10.0, 0.0], [0.0, 10.0]])
    Q_x: List[List[float]] = Field(default_factory=lambda: [[10.0, 0.0], [0.0, 10.0]])
    Q_u: List[List[float]] = Field(default_factory=lambda: [[1.0]])
    Q_lam: List[List[float]] = Field(default_factory=lambda: [[0.001]])
    x0: List[float] = Field(default_factory=lambda: [-0.5, -1.0])
    x_e: List[float] = Field(default_factory=lambda: [0.0, 0.0])
    x_ref_policy: Literal["terminal", "linear"] = "terminal"
    state_bound: float = Field(2.0, gt=0.0)
    control_bound: float = Field(2.0, gt=0.0)
    gap: GapSettings = Field(default_factory=GapSettings)
    solver: SgclConfig = Field(default_factory=SgclConfig)

    s_single: float = Field(1e-6, ge=0.0)
    z0_policy: Literal["ones", "zeros", "random"] = "ones"
    seed: int = 0
    n_starts: int = Field(20, ge=1)
    sweep_s_final: List[float] = Field(default_factory=lambda: [1e-4, 1e-5, 1e-6, 1e-7])
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def check_weights(self) -> "BenchmarkSpec":
        expected = {"Q_T": 2, "Q_x": 2, "Q_u": 1, "Q_lam": 1}
        for name, dim in expected.items():
            Q = np.asarray(getattr(self, name), dtype=float)
            if Q.shape != (dim, dim):
                raise ValueError(f"{name} must be {dim}x{dim} for {self.problem_id}, got {Q.shape}")
            if not np.allclose(Q, Q.T):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(Q).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        if len(self.x0) != 2 or len(self.x_e) != 2:
            raise ValueError("x0 and x_e must have two entries")
        return self


######
class ContinuationRecord(BaseModel):
    s: float
    cost: float
    max_natural_residual: float
    iterations: int
    termination: str
    timings: Dict[str, float] = Field(default_factory=dict)
