"""Relaxed feasible set of the scalar MPEC  min J(lam, eta)  s.t.  b_l <= lam <= b_u,  phi^c(lam, eta) <= s.

The set splits into three regions along eta = c (lam - b_l) and eta = c (lam - b_u):

    R1: lam in [b_l, b_u], eta >= c (lam - b_l), eta (lam - b_l) - c/2 (lam - b_l)^2 <= s
    R2: lam in [b_l, b_u], |eta| <= sqrt(2 c s), c (lam - b_u) <= eta <= c (lam - b_l)
    R3: lam in [b_l, b_u], eta <= c (lam - b_u), eta (lam - b_u) - c/2 (lam - b_u)^2 <= s

The demo checks the union of the regions against the closed form phi^c <= s.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from ocpec.tools.gap_function import scalar_gap_closed_form

logger = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-12


@dataclass
class GeometryPoint:
    lam: float
    eta: float
    region: int  # 0 outside, else 1, 2 or 3
    phi: float
    relaxed_feasible: bool


@dataclass
class GeometryTable:
    c: float
    s: float
    b_l: float
    b_u: float
    points: List[GeometryPoint] = field(default_factory=list)
    disagreements: int = 0


def _slack(s: float) -> float:
    return s + BOUNDARY_TOL * max(1.0, s)


def in_region(k: int, lam: float, eta: float, c: float, s: float, b_l: float, b_u: float) -> bool:
    if not b_l <= lam <= b_u:
        return False
    if k == 1:
        d = lam - b_l
        return eta >= c * d and eta * d - 0.5 * c * d**2 <= _slack(s)
    if k == 2:
        return c * (lam - b_u) <= eta <= c * (lam - b_l) and abs(eta) <= np.sqrt(2.0 * c * _slack(s))
    if k == 3:
        d = lam - b_u
        return eta <= c * d and eta * d - 0.5 * c * d**2 <= _slack(s)
    raise ValueError(f"region must be 1, 2 or 3, got {k}")


def classify_region(lam: float, eta: float, c: float, s: float, b_l: float, b_u: float) -> int:
    """First region whose inequalities hold at (lam, eta), 0 when it lies in none."""
    for k in (1, 2, 3):
        if in_region(k, lam, eta, c, s, b_l, b_u):
            return k
    return 0


def geometry_demo(c: float, s: float, b_l: float, b_u: float, grid: int) -> GeometryTable:
    if grid < 2:
        raise ValueError(f"grid must be >= 2, got {grid}")
    lam_axis = np.linspace(b_l - 1.0, b_u + 1.0, grid)
    eta_axis = np.linspace(b_l - 1.0, b_u + 1.0, grid)
    table = GeometryTable(c=c, s=s, b_l=b_l, b_u=b_u)
    for lam in lam_axis.tolist():
        for eta in eta_axis.tolist():
            region = classify_region(lam, eta, c, s, b_l, b_u)
            phi = scalar_gap_closed_form(lam, eta, c, b_l, b_u)
            feasible = b_l <= lam <= b_u and phi <= _slack(s)
            if (region > 0) != feasible:
                table.disagreements += 1
                logger.debug(f"region {region} disagrees with phi={phi:.6e} at ({lam:.6f}, {eta:.6f})")
            table.points.append(GeometryPoint(lam, eta, region, phi, feasible))
    logger.info(f"geometry demo on a {grid}x{grid} grid: {table.disagreements} disagreements")
    return table
