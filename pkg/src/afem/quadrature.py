"""Tensor Gauss-Legendre rules on cells and Gauss rules on edges.

All integrands appearing in assembly and estimation are piecewise
polynomial (spline-spline products) plus smooth data, so fixed-order
Gauss rules are exact for the polynomial part.  The reference rule on
[-1, 1] is cached per point count and mapped affinely onto the target
cell or edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mesh import Cell, Edge


@dataclass(frozen=True)
class QuadratureRule:
    """Points and positive weights; weights sum to the domain measure."""

    points: np.ndarray   # (n, 2) coordinates in the unit square
    weights: np.ndarray  # (n,) positive weights


@lru_cache(maxsize=None)
def _reference_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on [0, 1]."""
    if n < 1:
        raise ValueError(f"need at least one quadrature point, got n={n}")
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_points_1d(lo: float, hi: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on the interval [lo, hi]."""
    x, w = _reference_rule(n)
    length = hi - lo
    return lo + length * x, length * w


def gauss_cell(c: Cell, n: int) -> QuadratureRule:
    """Tensor Gauss rule on a cell, exact for degree <= 2n-1 per direction."""
    x0, x1, y0, y1 = c.bounds
    xs, wx = gauss_points_1d(x0, x1, n)
    ys, wy = gauss_points_1d(y0, y1, n)
    px, py = np.meshgrid(xs, ys, indexing="ij")
    points = np.column_stack([px.ravel(), py.ravel()])
    weights = np.outer(wx, wy).ravel()
    return QuadratureRule(points, weights)


def gauss_edge(e: Edge, n: int) -> QuadratureRule:
    """Gauss rule along an edge, exact for degree <= 2n-1 along the tangent."""
    ts, wt = gauss_points_1d(e.lo, e.lo + e.length, n)
    fixed = np.full_like(ts, e.fixed)
    if e.axis == 0:  # vertical edge, tangent along y
        points = np.column_stack([fixed, ts])
    else:            # horizontal edge, tangent along x
        points = np.column_stack([ts, fixed])
    return QuadratureRule(points, wt)
