"""Adaptive hierarchical B-spline finite elements for the clamped
biharmonic problem on the unit square.

The package implements the full adaptive loop
solve -> estimate -> mark -> refine for the fourth-order problem
``lap^2 u = f`` with ``u = du/dn = 0``, in two discretization modes: a
C1-conforming spline Galerkin method and a weak-boundary (Nitsche)
method with projected-Laplacian boundary terms, together with a
residual a posteriori estimator, Doerfler marking, graded quadtree
refinement, and a convergence-measurement harness.
"""

from .mesh import (Cell, Edge, Partition, ShapeReport, edges, refine,
                   shape_report, support_extension, uniform_partition)
from .splines import (HierarchicalSpace, SplineFunction, build_space,
                      coarse_to_fine, conforming_indices, load_solution,
                      quasi_interpolant, save_solution)
from .quadrature import QuadratureRule, gauss_cell, gauss_edge
from .solver import NotSPDError, SolveOptions, solve

__all__ = [
    "Cell", "Edge", "Partition", "ShapeReport", "uniform_partition",
    "refine", "edges", "support_extension", "shape_report",
    "HierarchicalSpace", "SplineFunction", "build_space", "conforming_indices",
    "quasi_interpolant", "coarse_to_fine", "save_solution", "load_solution",
    "QuadratureRule", "gauss_cell", "gauss_edge",
    "SolveOptions", "NotSPDError", "solve",
]

__version__ = "0.1.0"
