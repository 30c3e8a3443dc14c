"""Variational-inequality primitives: projection, natural residual, grid oracle."""

import logging
from typing import List, Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from ocpec.core.data_models import VIInstance, VISet, as_vector
from ocpec.core.errors import OracleError, ProjectionError
from ocpec.tools.qp_subsolver import solve_projection_qp

logger = logging.getLogger(__name__)


def _reject_nan(**arrays: np.ndarray) -> None:
    for name, arr in arrays.items():
        if np.isnan(arr).any():
            raise ValueError(f"{name} contains NaN")


def project_box(x, lower, upper) -> np.ndarray:
    x, lower, upper = as_vector(x), as_vector(lower), as_vector(upper)
    _reject_nan(x=x, lower=lower, upper=upper)
    return np.minimum(np.maximum(lower, x), upper)


def project(x, vi_set: VISet) -> np.ndarray:
    """Euclidean projection onto K."""
    x = as_vector(x)
    if vi_set.kind == "box":
        return project_box(x, vi_set.lower, vi_set.upper)
    _reject_nan(x=x)
    n = x.size
    try:
        omega, _ = solve_projection_qp(np.eye(n), 1.0, x, np.zeros(n), vi_set)
    except ProjectionError as exc:
        raise ProjectionError(f"Euclidean projection failed on a set validated as nonempty: {exc}") from exc
    return omega


def natural_residual(lam, F_val, vi_set: VISet) -> np.ndarray:
    """Phi = lam - Pi_K(lam - F); zero exactly at solutions of VI(K, F)."""
    lam, F_val = as_vector(lam), as_vector(F_val)
    if not (np.isfinite(lam).all() and np.isfinite(F_val).all()):
        raise ValueError("natural residual needs finite lam and F")
    return lam - project(lam - F_val, vi_set)


def _extreme_candidates(points: np.ndarray) -> np.ndarray:
    """Points whose convex hull equals that of `points` (a linear minimum is attained there)."""
    if points.shape[1] == 1:
        return points[[np.argmin(points[:, 0]), np.argmax(points[:, 0])]]
    try:
        return points[ConvexHull(points).vertices]
    except (QhullError, ValueError):
        return points


def brute_force_vi_solve(
    inst: VIInstance, grid_resolution: float, tolerance: Optional[float] = None
) -> List[np.ndarray]:
    """Approximate SOL(K, F) by enumeration on a grid over a bounded K with n_lambda <= 2.

    A grid point passes when max_{omega in K} F(lam)^T (lam - omega) <= tolerance. Passing
    points are grouped into connected clusters and each cluster reports its point of
    smallest gap.
    """
    vi_set = inst.vi_set
    if vi_set.n_lambda > 2:
        raise OracleError(f"brute-force search supports n_lambda <= 2, got {vi_set.n_lambda}")
    if grid_resolution <= 0:
        raise OracleError("grid_resolution must be positive")
    lo, hi = vi_set.bounding_box()

    axes = [np.linspace(lo[i], hi[i], int(round((hi[i] - lo[i]) / grid_resolution)) + 1) for i in range(lo.size)]
    mesh = np.meshgrid(*axes, indexing="ij")
    shape = mesh[0].shape
    points = np.stack([m.ravel() for m in mesh], axis=1)
    inside = vi_set.contains_many(points)
    if not inside.any():
        raise OracleError("grid resolution too coarse: no grid point lies in K")

    candidates = _extreme_candidates(points[inside])
    gap = np.full(points.shape[0], np.inf)
    F_vals = np.array([inst.evaluate(p) for p in points[inside]])
    # max over omega of F^T (lam - omega) = F^T lam - min_omega F^T omega
    gap[inside] = np.einsum("ij,ij->i", F_vals, points[inside]) - (F_vals @ candidates.T).min(axis=1)

    if tolerance is None:
        tolerance = 10.0 * grid_resolution * (1.0 + np.linalg.norm(F_vals, axis=1).max())
    passing = (gap <= tolerance).reshape(shape)
    labels, n_clusters = ndimage.label(passing, structure=np.ones((3,) * lo.size))
    flat_labels = labels.ravel()

    solutions = []
    for cluster in range(1, n_clusters + 1):
        members = np.flatnonzero(flat_labels == cluster)
        solutions.append(points[members[np.argmin(gap[members])]].copy())
    solutions.sort(key=lambda p: tuple(p))
    logger.debug(f"brute-force oracle: {passing.sum()} passing grid points in {n_clusters} clusters")
    return solutions
