"""Stage maps and costs of an OCPEC.

Every stage map is evaluated as m(x, u, lam) and differentiated as
(dm/dx, dm/du, dm/dlam); maps that do not depend on lam (path constraints)
return a zero lam-block.
"""

import logging
from typing import Callable, Optional, Protocol, Tuple, Union

import numpy as np
from scipy.linalg import block_diag

from ocpec.core.data_models import as_matrix, as_vector
from ocpec.core.errors import ModelError

logger = logging.getLogger(__name__)

Jacobian = Tuple[np.ndarray, np.ndarray, np.ndarray]


class StageMap(Protocol):
    name: str
    out_dim: int

    def __call__(self, x: np.ndarray, u: np.ndarray, lam: np.ndarray) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray, u: np.ndarray, lam: np.ndarray) -> Jacobian: ...


class AffineMap:
    """m(x, u, lam) = Ax x + Au u + Al lam + b."""

    def __init__(self, Ax, Au, Al=None, b=None, name: str = "affine"):
        self.name = name
        self.Ax = as_matrix(Ax)
        self.Au = as_matrix(Au)
        self.Al = None if Al is None else as_matrix(Al)
        self.out_dim = self.Ax.shape[0]
        self.b = np.zeros(self.out_dim) if b is None else as_vector(b)

    @classmethod
    def zero(cls, out_dim: int, n_x: int, n_u: int, n_lambda: int, name: str) -> "AffineMap":
        return cls(np.zeros((out_dim, n_x)), np.zeros((out_dim, n_u)), np.zeros((out_dim, n_lambda)), name=name)

    def _lam_block(self, n_lambda: int) -> np.ndarray:
        return self.Al if self.Al is not None else np.zeros((self.out_dim, n_lambda))

    def __call__(self, x, u, lam) -> np.ndarray:
        out = self.Ax @ x + self.Au @ u + self.b
        if self.Al is not None:
            out = out + self.Al @ lam
        return out

    def jacobian(self, x, u, lam) -> Jacobian:
        return self.Ax, self.Au, self._lam_block(np.asarray(lam).size)


class SmoothMap:
    """User map with an analytic Jacobian returning (d/dx, d/du, d/dlam)."""

    def __init__(self, fn: Callable, jac: Callable, out_dim: int, name: str = "smooth"):
        self.fn = fn
        self.jac = jac
        self.out_dim = int(out_dim)
        self.name = name

    def __call__(self, x, u, lam) -> np.ndarray:
        return as_vector(self.fn(x, u, lam))

    def jacobian(self, x, u, lam) -> Jacobian:
        Jx, Ju, Jl = self.jac(x, u, lam)
        return as_matrix(Jx).reshape(self.out_dim, -1), as_matrix(Ju).reshape(self.out_dim, -1), as_matrix(
            Jl
        ).reshape(self.out_dim, -1)


def check_map_dims(m: StageMap, n_x: int, n_u: int, n_lambda: int, expected_out: Optional[int] = None) -> None:
    """Evaluate m at the origin and raise ModelError naming the map on any shape mismatch."""
    x, u, lam = np.zeros(n_x), np.zeros(n_u), np.zeros(n_lambda)
    try:
        value = np.asarray(m(x, u, lam), dtype=float).reshape(-1)
        Jx, Ju, Jl = (np.asarray(J, dtype=float) for J in m.jacobian(x, u, lam))
    except (ValueError, TypeError, IndexError) as exc:
        raise ModelError(f"map '{m.name}' cannot be evaluated with n_x={n_x}, n_u={n_u}, n_lambda={n_lambda}: {exc}") from exc
    out = m.out_dim if expected_out is None else expected_out
    if value.size != out or value.size != m.out_dim:
        raise ModelError(f"map '{m.name}' returns {value.size} entries, expected {out}")
    for block, cols, label in ((Jx, n_x, "x"), (Ju, n_u, "u"), (Jl, n_lambda, "lambda")):
        if block.shape != (out, cols):
            raise ModelError(f"map '{m.name}' has a {label}-Jacobian of shape {block.shape}, expected {(out, cols)}")
    if not (np.isfinite(value).all() and all(np.isfinite(J).all() for J in (Jx, Ju, Jl))):
        raise ModelError(f"map '{m.name}' is not finite at the origin")


def _check_psd(H: np.ndarray, name: str) -> None:
    if not np.allclose(H, H.T, atol=1e-12):
        raise ModelError(f"{name} Hessian is not symmetric")
    if H.size and np.linalg.eigvalsh(H).min() < -1e-12:
        raise ModelError(f"{name} Hessian is not positive semidefinite")


class QuadraticTerminalCost:
    """L_T(x) = (x - x_e)^T Q_T (x - x_e)."""

    quadratic = True
    name = "L_T"

    def __init__(self, Q_T, x_e):
        self.Q_T = as_matrix(Q_T)
        self.x_e = as_vector(x_e)
        _check_psd(self.Q_T, self.name)

    def value(self, x) -> float:
        d = x - self.x_e
        return float(d @ self.Q_T @ d)

    def gradient(self, x) -> np.ndarray:
        return 2.0 * self.Q_T @ (x - self.x_e)

    def hessian(self) -> np.ndarray:
        return 2.0 * self.Q_T


XRef = Union[np.ndarray, Callable[[float], np.ndarray]]


class QuadraticStageCost:
    """L_S(t, x, u, lam) = |x - x_ref(t)|^2_Qx + |u|^2_Qu + |lam|^2_Qlam."""

    quadratic = True
    name = "L_S"

    def __init__(self, Q_x, Q_u, Q_lam, x_ref: XRef):
        self.Q_x, self.Q_u, self.Q_lam = as_matrix(Q_x), as_matrix(Q_u), as_matrix(Q_lam)
        self.x_ref = x_ref if callable(x_ref) else as_vector(x_ref)
        for label, Q in (("Q_x", self.Q_x), ("Q_u", self.Q_u), ("Q_lam", self.Q_lam)):
            _check_psd(Q, f"{self.name} {label}")

    def reference(self, t: float) -> np.ndarray:
        return as_vector(self.x_ref(t)) if callable(self.x_ref) else self.x_ref

    def value(self, t, x, u, lam) -> float:
        dx = x - self.reference(t)
        return float(dx @ self.Q_x @ dx + u @ self.Q_u @ u + lam @ self.Q_lam @ lam)

    def gradient(self, t, x, u, lam) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return 2.0 * self.Q_x @ (x - self.reference(t)), 2.0 * self.Q_u @ u, 2.0 * self.Q_lam @ lam

    def hessian(self) -> np.ndarray:
        return block_diag(2.0 * self.Q_x, 2.0 * self.Q_u, 2.0 * self.Q_lam)


class SmoothTerminalCost:
    """User terminal cost; `quadratic=True` promises that `hess` is its exact constant Hessian."""

    name = "L_T"

    def __init__(self, fn: Callable, grad: Callable, hess: Optional[np.ndarray] = None, quadratic: bool = False):
        self.fn, self.grad = fn, grad
        self.hess = None if hess is None else as_matrix(hess)
        self.quadratic = quadratic and self.hess is not None

    def value(self, x) -> float:
        return float(self.fn(x))

    def gradient(self, x) -> np.ndarray:
        return as_vector(self.grad(x))

    def hessian(self) -> np.ndarray:
        if not self.quadratic:
            raise ModelError("L_T is not declared quadratic")
        return self.hess


class SmoothStageCost:
    name = "L_S"

    def __init__(self, fn: Callable, grad: Callable, hess: Optional[np.ndarray] = None, quadratic: bool = False):
        self.fn, self.grad = fn, grad
        self.hess = None if hess is None else as_matrix(hess)
        self.quadratic = quadratic and self.hess is not None

    def value(self, t, x, u, lam) -> float:
        return float(self.fn(t, x, u, lam))

    def gradient(self, t, x, u, lam):
        gx, gu, gl = self.grad(t, x, u, lam)
        return as_vector(gx), as_vector(gu), as_vector(gl)

    def hessian(self) -> np.ndarray:
        if not self.quadratic:
            raise ModelError("L_S is not declared quadratic")
        return self.hess


def check_quadratic_cost(cost, sizes: Tuple[int, ...], rng: np.random.Generator, samples: int = 3) -> None:
    """A cost declared quadratic must match its second-order Taylor model exactly.

    `sizes` is (n_x,) for a terminal cost and (n_x, n_u, n_lambda) for a stage cost.
    """
    if not getattr(cost, "quadratic", False):
        return
    H = cost.hessian()
    n = sum(sizes)
    if H.shape != (n, n):
        raise ModelError(f"{cost.name} Hessian has shape {H.shape}, expected {(n, n)}")
    _check_psd(H, cost.name)

    def split(p):
        return np.split(p, np.cumsum(sizes)[:-1])

    def value(p):
        return cost.value(*split(p)) if len(sizes) == 1 else cost.value(0.0, *split(p))

    def gradient(p):
        g = cost.gradient(*split(p)) if len(sizes) == 1 else cost.gradient(0.0, *split(p))
        return np.concatenate([as_vector(b) for b in g]) if isinstance(g, tuple) else as_vector(g)

    for _ in range(samples):
        p, d = rng.standard_normal(n), rng.standard_normal(n)
        model = value(p) + gradient(p) @ d + 0.5 * d @ H @ d
        actual = value(p + d)
        if abs(actual - model) > 1e-8 * (1.0 + abs(actual)):
            raise ModelError(f"{cost.name} is declared quadratic but its Hessian does not reproduce it")
