"""Assembly of the biharmonic bilinear forms, loads and boundary norms.

Two discretizations share one volume term ``(lap u, lap v)``:

* conforming mode restricts trial and test functions to the subspace
  with zero value and normal derivative on the boundary;
* weak-boundary (Nitsche) mode keeps the full space and adds boundary
  integrals built from the cellwise L2 projection of the Laplacian onto
  tensor polynomials of degree r-2, plus penalty terms weighted by
  ``h^-3`` and ``h^-1`` with stabilization parameters gamma1, gamma2.

All spline-spline integrals are exact for the default rule of
``max(r + 2, 6)`` Gauss points per direction; data integrals use the
same rule, leaving unresolved data to the oscillation terms tracked by
the estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.sparse import coo_matrix, csr_matrix, triu

from .mesh import Cell, Edge, Partition, edges
from .quadrature import gauss_cell, gauss_edge, gauss_points_1d
from .splines import HierarchicalSpace, SplineFunction, conforming_indices

__all__ = [
    "AnalyticField",
    "FormParams",
    "SystemMatrix",
    "LoadVector",
    "PiecewisePoly",
    "assemble",
    "project_laplacian",
    "project_from_samples",
    "mesh_norm",
    "triple_norm",
    "inconsistency_apply",
    "energy_norm_sq",
    "energy_error_sq",
    "energy_diff_sq",
    "h2_seminorm_sq",
    "default_gamma",
]


@dataclass(frozen=True)
class AnalyticField:
    """Closed-form scalar field with the callbacks the norms need."""

    value: Callable
    grad: Callable | None = None        # -> (ux, uy) arrays
    laplacian: Callable | None = None


def default_gamma(r: int) -> float:
    """Stabilization that keeps the Nitsche system SPD for r in 2..4.

    Trace and inverse constants grow like (r+1)^2 per differentiation
    order; the factor 10 is calibrated headroom.
    """
    return 10.0 * (r + 1) ** 4


def default_quad_n(r: int) -> int:
    """Gauss points per direction for assembly and estimation.

    ``r + 2`` makes every spline-spline integral exact; the floor of 6
    keeps the data-quadrature error of rough sources far below the
    orthogonality-identity tolerances at low degree.
    """
    return max(r + 2, 6)


@dataclass(frozen=True)
class FormParams:
    mode: str = "conforming"          # "conforming" | "nitsche"
    gamma1: float | None = None
    gamma2: float | None = None
    quad_n: int | None = None

    def __post_init__(self):
        if self.mode not in ("conforming", "nitsche"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def resolved(self, r: int) -> "FormParams":
        g1 = self.gamma1 if self.gamma1 is not None else default_gamma(r)
        g2 = self.gamma2 if self.gamma2 is not None else default_gamma(r)
        qn = self.quad_n if self.quad_n is not None else default_quad_n(r)
        if self.mode == "nitsche" and (g1 <= 0.0 or g2 <= 0.0):
            raise ValueError("nitsche mode needs positive gamma1 and gamma2")
        return replace(self, gamma1=g1, gamma2=g2, quad_n=qn)


@dataclass(frozen=True)
class SystemMatrix:
    """Sparse symmetric form matrix over a subset of active functions."""

    matrix: csr_matrix
    positions: tuple[int, ...]  # active-function positions, row/col order

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def export_coo(self) -> str:
        """Coordinate triplets ``row col value``, lexicographic order."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        lines = [f"{coo.row[k]} {coo.col[k]} {coo.data[k]!r}"
                 for k in order]
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass(frozen=True)
class LoadVector:
    values: np.ndarray
    positions: tuple[int, ...]


# ---------------------------------------------------------------------------
# cellwise Legendre helpers
# ---------------------------------------------------------------------------

def _legendre_1d(xi: np.ndarray, d: int, order: int) -> np.ndarray:
    """Values of ``P_a^(order)`` for a = 0..d at local coordinates xi."""
    eye = np.eye(d + 1)
    if order:
        coef = npleg.legder(eye, order, axis=0)
        if coef.shape[0] == 0:
            return np.zeros((d + 1, len(xi)))
    else:
        coef = eye
    return npleg.legval(np.asarray(xi, float), coef)


def _local_coords(cell: Cell, xs: np.ndarray, ys: np.ndarray):
    x0, x1, y0, y1 = cell.bounds
    xi = 2.0 * (np.asarray(xs, float) - x0) / (x1 - x0) - 1.0
    zeta = 2.0 * (np.asarray(ys, float) - y0) / (y1 - y0) - 1.0
    return xi, zeta


def _legendre_modes(cell: Cell, d: int, xs: np.ndarray, ys: np.ndarray,
                    ax: int = 0, ay: int = 0) -> np.ndarray:
    """Tensor Legendre mode derivatives at paired points, ((d+1)^2, n)."""
    xi, zeta = _local_coords(cell, xs, ys)
    Px = _legendre_1d(xi, d, ax)
    Py = _legendre_1d(zeta, d, ay)
    scale = (2.0 / cell.side) ** (ax + ay)
    return (Px[:, None, :] * Py[None, :, :]).reshape((d + 1) ** 2, -1) * scale


class PiecewisePoly:
    """Cellwise tensor polynomial of bounded degree.

    Coefficients are tensor monomial coefficients on local coordinates
    ``(xi, zeta) in [-1, 1]^2`` per cell; ``coeffs[cell][a, b]``
    multiplies ``xi**a * zeta**b``.
    """

    def __init__(self, degree: int, coeffs: dict[Cell, np.ndarray]):
        self.degree = degree
        self.coeffs = coeffs

    def eval_many(self, xs: np.ndarray, ys: np.ndarray, ax: int, ay: int,
                  cell: Cell) -> np.ndarray:
        c = self.coeffs.get(cell)
        if c is None:
            raise KeyError(f"no polynomial stored on {cell}")
        if ax:
            c = np.polynomial.polynomial.polyder(c, ax, axis=0)
        if ay:
            c = np.polynomial.polynomial.polyder(c, ay, axis=1)
        xi, zeta = _local_coords(cell, xs, ys)
        vals = np.polynomial.polynomial.polyval2d(xi, zeta, np.atleast_2d(c))
        return vals * (2.0 / cell.side) ** (ax + ay)

    def eval(self, x: float, y: float, ax: int = 0, ay: int = 0,
             cell: Cell | None = None) -> float:
        if cell is None:
            cell = next(c for c in self.coeffs if c.contains(x, y))
        return float(self.eval_many(np.array([x]), np.array([y]), ax, ay,
                                    cell)[0])


def _leg2poly_matrix(d: int) -> np.ndarray:
    M = np.zeros((d + 1, d + 1))
    for a in range(d + 1):
        e = np.zeros(a + 1)
        e[a] = 1.0
        M[: a + 1, a] = npleg.leg2poly(e)
    return M


def _project_values(cell: Cell, d: int, vals: np.ndarray, rule) -> np.ndarray:
    """Legendre coefficients of the L2 projection of sampled values."""
    modes = _legendre_modes(cell, d, rule.points[:, 0], rule.points[:, 1])
    a = np.arange(d + 1)
    norms = np.outer(2 * a + 1, 2 * a + 1).astype(float).ravel() / cell.side ** 2
    return ((modes * rule.weights) @ vals) * norms


def project_laplacian(fn: SplineFunction,
                      quad_n: int | None = None) -> PiecewisePoly:
    """Cellwise L2 projection of ``lap fn`` onto tensor degree r-2."""
    space = fn.space
    r = space.degree
    d = r - 2
    n = quad_n if quad_n is not None else default_quad_n(r)
    l2p = _leg2poly_matrix(d)
    coeffs = {}
    for cell in space.partition:
        rule = gauss_cell(cell, n)
        xs, ys = rule.points[:, 0], rule.points[:, 1]
        lap = (fn.eval_many(xs, ys, 2, 0, cell)
               + fn.eval_many(xs, ys, 0, 2, cell))
        cleg = _project_values(cell, d, lap, rule).reshape(d + 1, d + 1)
        coeffs[cell] = l2p @ cleg @ l2p.T
    return PiecewisePoly(d, coeffs)


def project_from_samples(p: Partition, g, degree: int,
                         cells=None, quad_n: int | None = None) -> PiecewisePoly:
    """Cellwise L2 projection of a sampled scalar field.

    The projection is discretised with the assembly quadrature rule,
    which is the faithful choice for data that is not piecewise
    polynomial.
    """
    n = quad_n if quad_n is not None else degree + 4
    l2p = _leg2poly_matrix(degree)
    coeffs = {}
    for cell in (cells if cells is not None else p.cells):
        rule = gauss_cell(cell, n)
        vals = np.asarray(g(rule.points[:, 0], rule.points[:, 1]), float)
        cleg = _project_values(cell, degree, vals, rule).reshape(
            degree + 1, degree + 1)
        coeffs[cell] = l2p @ cleg @ l2p.T
    return PiecewisePoly(degree, coeffs)


# ---------------------------------------------------------------------------
# form assembly
# ---------------------------------------------------------------------------

def assemble(s: HierarchicalSpace, f, params: FormParams,
             ) -> tuple[SystemMatrix, LoadVector]:
    """Assemble the form matrix and load for the requested mode.

    ``f`` is a vectorised callable ``f(x, y)``.  In conforming mode the
    system is restricted to the boundary-conforming subspace; an empty
    subspace (mesh too coarse) raises.
    """
    params = params.resolved(s.degree)
    n = params.quad_n
    if params.mode == "conforming":
        keep = conforming_indices(s)
        if not keep:
            raise ValueError(
                "conforming subspace is empty; start from a finer mesh")
    else:
        keep = tuple(range(s.dim))
    imap = np.full(s.dim, -1, dtype=int)
    for k, pos in enumerate(keep):
        imap[pos] = k
    dim = len(keep)

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    b = np.zeros(dim)

    def scatter(pos, block, load=None):
        idx = imap[list(pos)]
        live = idx >= 0
        if not np.any(live):
            return
        sub = idx[live]
        blk = block[np.ix_(live, live)]
        k = len(sub)
        rows.append(np.repeat(sub, k))
        cols.append(np.tile(sub, k))
        vals.append(blk.ravel())
        if load is not None:
            b[sub] += load[live]

    # volume pass: (lap u, lap v) and the load
    for cell in s.partition:
        x0, x1, y0, y1 = cell.bounds
        gx, wx = gauss_points_1d(x0, x1, n)
        gy, wy = gauss_points_1d(y0, y1, n)
        w = np.outer(wx, wy).ravel()
        pos, tabs = s.basis_on_cell(cell, gx, gy, [(0, 0), (2, 0), (0, 2)],
                                    grid=True)
        V = tabs[(0, 0)]
        LAP = tabs[(2, 0)] + tabs[(0, 2)]
        px, py = np.meshgrid(gx, gy, indexing="ij")
        fvals = np.asarray(f(px.ravel(), py.ravel()), float)
        scatter(pos, (LAP * w) @ LAP.T, V @ (w * fvals))

    if params.mode == "nitsche":
        _assemble_boundary(s, params, scatter)

    A = coo_matrix((np.concatenate(vals),
                    (np.concatenate(rows), np.concatenate(cols))),
                   shape=(dim, dim)).tocsr()
    upper = triu(A, k=0)
    A = (upper + triu(A, k=1).T).tocsr()
    return SystemMatrix(A, tuple(keep)), LoadVector(b, tuple(keep))


def _edge_orders(axis: int):
    """Derivative orders for traces: value, normal derivative."""
    return (1, 0) if axis == 0 else (0, 1)


def _assemble_boundary(s: HierarchicalSpace, params: FormParams, scatter):
    n = params.quad_n
    d = s.degree - 2
    _, bdry = edges(s.partition)
    proj_cache: dict[Cell, tuple[tuple[int, ...], np.ndarray]] = {}

    def projector(cell: Cell):
        """Legendre coefficients of lap B for every active function."""
        got = proj_cache.get(cell)
        if got is not None:
            return got
        rule = gauss_cell(cell, n)
        xs, ys = rule.points[:, 0], rule.points[:, 1]
        pos, tabs = s.basis_on_cell(cell, xs, ys, [(2, 0), (0, 2)], grid=False)
        lap = tabs[(2, 0)] + tabs[(0, 2)]
        modes = _legendre_modes(cell, d, xs, ys)
        a = np.arange(d + 1)
        norms = np.outer(2 * a + 1, 2 * a + 1).astype(float).ravel() \
            / cell.side ** 2
        coef = (lap * rule.weights) @ modes.T * norms  # (k, (d+1)^2)
        got = (pos, coef)
        proj_cache[cell] = got
        return got

    for e in bdry:
        cell = e.plus
        rule = gauss_edge(e, n)
        xs, ys, w = rule.points[:, 0], rule.points[:, 1], rule.weights
        nx, ny = e.normal
        dax, day = _edge_orders(e.axis)
        pos, tabs = s.basis_on_cell(cell, xs, ys,
                                    [(0, 0), (dax, day)], grid=False)
        v = tabs[(0, 0)]
        vn = (nx + ny) * tabs[(dax, day)]  # one of nx, ny is 0
        pc_pos, coef = projector(cell)
        assert pc_pos == pos
        modes0 = _legendre_modes(cell, d, xs, ys)
        modesn = (nx * _legendre_modes(cell, d, xs, ys, 1, 0)
                  + ny * _legendre_modes(cell, d, xs, ys, 0, 1))
        pvals = coef @ modes0    # traces of Pi(lap B)
        pnvals = coef @ modesn   # normal derivative traces
        h = e.length
        block = (
            -((pvals * w) @ vn.T + (vn * w) @ pvals.T)
            + ((pnvals * w) @ v.T + (v * w) @ pnvals.T)
            + params.gamma1 * h ** -3 * (v * w) @ v.T
            + params.gamma2 * h ** -1 * (vn * w) @ vn.T
        )
        scatter(pos, block)


# ---------------------------------------------------------------------------
# norms and functionals
# ---------------------------------------------------------------------------

def _edge_trace(fn, e: Edge, xs, ys, normal: bool) -> np.ndarray:
    """Trace (or normal-derivative trace) values on a boundary edge."""
    nx, ny = e.normal
    if isinstance(fn, SplineFunction):
        if normal:
            return (nx * fn.eval_many(xs, ys, 1, 0, e.plus)
                    + ny * fn.eval_many(xs, ys, 0, 1, e.plus))
        return fn.eval_many(xs, ys, 0, 0, e.plus)
    if isinstance(fn, AnalyticField):
        if normal:
            gx, gy = fn.grad(xs, ys)
            return nx * np.asarray(gx, float) + ny * np.asarray(gy, float)
        return np.asarray(fn.value(xs, ys), float)
    if normal:
        raise TypeError("normal trace of a bare callable is not defined")
    return np.asarray(fn(xs, ys), float)


def mesh_norm(fn, s: float, p: Partition, normal: bool = False,
              quad_n: int | None = None) -> float:
    """Boundary mesh norm: sqrt of sum over boundary edges of
    ``h^(-2s) * ||trace||^2``.

    ``fn`` may be a spline, an :class:`AnalyticField`, or a plain
    callable; with ``normal=True`` the normal-derivative trace is used.
    """
    degree = getattr(getattr(fn, "space", None), "degree", 3)
    n = quad_n if quad_n is not None else default_quad_n(degree)
    _, bdry = edges(p)
    total = 0.0
    for e in bdry:
        rule = gauss_edge(e, n)
        vals = _edge_trace(fn, e, rule.points[:, 0], rule.points[:, 1], normal)
        total += e.length ** (-2.0 * s) * float(rule.weights @ vals ** 2)
    return total ** 0.5


def energy_norm_sq(fn: SplineFunction, quad_n: int | None = None) -> float:
    """Squared energy norm ``||lap fn||^2`` (exact quadrature)."""
    s = fn.space
    n = quad_n if quad_n is not None else default_quad_n(s.degree)
    total = 0.0
    for cell in s.partition:
        rule = gauss_cell(cell, n)
        d = fn.eval_batch(rule.points[:, 0], rule.points[:, 1],
                          [(2, 0), (0, 2)], cell)
        lap = d[(2, 0)] + d[(0, 2)]
        total += float(rule.weights @ lap ** 2)
    return total


def triple_norm(fn, p: Partition, params: FormParams,
                quad_n: int | None = None) -> float:
    """Mesh-dependent norm: energy part plus gamma-weighted boundary norms."""
    r = getattr(getattr(fn, "space", None), "degree", 3)
    params = params.resolved(r)
    n = quad_n if quad_n is not None else params.quad_n
    if isinstance(fn, SplineFunction):
        interior = energy_norm_sq(fn, n)
    elif isinstance(fn, AnalyticField):
        interior = 0.0
        for cell in p:
            rule = gauss_cell(cell, n)
            lap = np.asarray(
                fn.laplacian(rule.points[:, 0], rule.points[:, 1]), float)
            interior += float(rule.weights @ lap ** 2)
    else:
        raise TypeError("triple_norm needs a SplineFunction or AnalyticField")
    b32 = mesh_norm(fn, 1.5, p, normal=False, quad_n=n)
    b12 = mesh_norm(fn, 0.5, p, normal=True, quad_n=n)
    return (interior + params.gamma1 * b32 ** 2
            + params.gamma2 * b12 ** 2) ** 0.5


def triple_norm_matrix(s: HierarchicalSpace, params: FormParams) -> csr_matrix:
    """Gram matrix of the mesh-dependent norm over the full active basis:
    ``|||v|||^2 = v^T T v``."""
    params = params.resolved(s.degree)
    n = params.quad_n
    rows, cols, vals = [], [], []

    def scatter(pos, block):
        k = len(pos)
        rows.append(np.repeat(pos, k))
        cols.append(np.tile(pos, k))
        vals.append(block.ravel())

    for cell in s.partition:
        rule = gauss_cell(cell, n)
        xs, ys, w = rule.points[:, 0], rule.points[:, 1], rule.weights
        pos, tabs = s.basis_on_cell(cell, xs, ys, [(2, 0), (0, 2)],
                                    grid=False)
        lap = tabs[(2, 0)] + tabs[(0, 2)]
        scatter(pos, (lap * w) @ lap.T)
    _, bdry = edges(s.partition)
    for e in bdry:
        rule = gauss_edge(e, n)
        xs, ys, w = rule.points[:, 0], rule.points[:, 1], rule.weights
        nx, ny = e.normal
        dax, day = _edge_orders(e.axis)
        pos, tabs = s.basis_on_cell(e.plus, xs, ys, [(0, 0), (dax, day)],
                                    grid=False)
        v = tabs[(0, 0)]
        vn = (nx + ny) * tabs[(dax, day)]
        h = e.length
        scatter(pos, params.gamma1 * h ** -3 * (v * w) @ v.T
                + params.gamma2 * h ** -1 * (vn * w) @ vn.T)
    T = coo_matrix((np.concatenate(vals),
                    (np.concatenate(rows), np.concatenate(cols))),
                   shape=(s.dim, s.dim)).tocsr()
    upper = triu(T, k=0)
    return (upper + triu(T, k=1).T).tocsr()


def inconsistency_apply(lap_u, grad_lap_u, v: SplineFunction, p: Partition,
                        s: HierarchicalSpace,
                        quad_n: int | None = None) -> float:
    """Boundary defect functional of the projected-Laplacian form.

    ``lap_u(x, y)`` and ``grad_lap_u(x, y) -> (gx, gy)`` are analytic
    callbacks for the exact solution; returns
    ``int_G ((Pi lap u)_n - (lap u)_n) v - int_G (Pi lap u - lap u) v_n``
    with the projection taken cellwise on boundary cells from samples.
    """
    n = quad_n if quad_n is not None else default_quad_n(s.degree)
    _, bdry = edges(p)
    bcells = sorted({e.plus for e in bdry})
    pi = project_from_samples(p, lap_u, s.degree - 2, cells=bcells, quad_n=n)
    total = 0.0
    for e in bdry:
        rule = gauss_edge(e, n)
        xs, ys, w = rule.points[:, 0], rule.points[:, 1], rule.weights
        nx, ny = e.normal
        cell = e.plus
        pi_v = pi.eval_many(xs, ys, 0, 0, cell)
        pi_n = (nx * pi.eval_many(xs, ys, 1, 0, cell)
                + ny * pi.eval_many(xs, ys, 0, 1, cell))
        lap_v = np.asarray(lap_u(xs, ys), float)
        gx, gy = grad_lap_u(xs, ys)
        lap_n = nx * np.asarray(gx, float) + ny * np.asarray(gy, float)
        vv = v.eval_many(xs, ys, 0, 0, cell)
        vn = (nx * v.eval_many(xs, ys, 1, 0, cell)
              + ny * v.eval_many(xs, ys, 0, 1, cell))
        total += float(w @ ((pi_n - lap_n) * vv))
        total -= float(w @ ((pi_v - lap_v) * vn))
    return total


# ---------------------------------------------------------------------------
# error integrals
# ---------------------------------------------------------------------------

def energy_error_sq(lap_u, fn: SplineFunction,
                    quad_n: int | None = None) -> float:
    """``||lap u - lap fn||^2`` against an analytic Laplacian callback."""
    s = fn.space
    n = quad_n if quad_n is not None else default_quad_n(s.degree) + 2
    total = 0.0
    for cell in s.partition:
        rule = gauss_cell(cell, n)
        xs, ys = rule.points[:, 0], rule.points[:, 1]
        d = fn.eval_batch(xs, ys, [(2, 0), (0, 2)], cell)
        diff = np.asarray(lap_u(xs, ys), float) - d[(2, 0)] - d[(0, 2)]
        total += float(rule.weights @ diff ** 2)
    return total


def energy_diff_sq(fine: SplineFunction, coarse: SplineFunction,
                   quad_n: int | None = None) -> float:
    """``||lap(fine - coarse)||^2`` for splines on nested partitions."""
    n = quad_n if quad_n is not None else default_quad_n(fine.space.degree)
    coarse_cells = coarse.space.partition
    total = 0.0
    for cell in fine.space.partition:
        probe = cell
        while probe not in coarse_cells and probe.level > 0:
            probe = probe.parent()
        if probe not in coarse_cells:
            raise ValueError("partitions are not nested")
        rule = gauss_cell(cell, n)
        xs, ys = rule.points[:, 0], rule.points[:, 1]
        df = fine.eval_batch(xs, ys, [(2, 0), (0, 2)], cell)
        dc = coarse.eval_batch(xs, ys, [(2, 0), (0, 2)], probe)
        diff = df[(2, 0)] + df[(0, 2)] - dc[(2, 0)] - dc[(0, 2)]
        total += float(rule.weights @ diff ** 2)
    return total


def h2_seminorm_sq(fn: SplineFunction, cells=None,
                   quad_n: int | None = None) -> float:
    """``int (fxx^2 + 2 fxy^2 + fyy^2)`` over the given cells (default all)."""
    s = fn.space
    n = quad_n if quad_n is not None else default_quad_n(s.degree)
    total = 0.0
    for cell in (cells if cells is not None else s.partition):
        rule = gauss_cell(cell, n)
        d = fn.eval_batch(rule.points[:, 0], rule.points[:, 1],
                          [(2, 0), (1, 1), (0, 2)], cell)
        total += float(rule.weights @ (d[(2, 0)] ** 2
                                       + 2.0 * d[(1, 1)] ** 2
                                       + d[(0, 2)] ** 2))
    return total
