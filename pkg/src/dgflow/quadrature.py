"""Gauss-type quadrature on the reference interval [0,1], unit triangle and unit square.

Triangle rules come from a Duffy (collapsed tensor) construction, so any
exactness degree is available at the cost of a few extra points.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (n,) on the interval, (n, 2) on triangle/square
    weights: np.ndarray  # (n,), strictly positive
    exact_degree: int


@lru_cache(maxsize=None)
def interval_rule(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on [0,1] exact for polynomials of degree <= degree."""
    if degree < 0:
        raise ValueError(f"degree must be >= 0, got {degree}")
    npts = (degree + 2) // 2  # ceil((degree+1)/2)
    x, w = np.polynomial.legendre.leggauss(npts)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w, 2 * npts - 1)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Rule on the unit triangle {x,y >= 0, x+y <= 1}, exact to total degree `degree`.

    Duffy map of a tensor Gauss rule: (u, v) -> (u, v(1-u)) with jacobian (1-u);
    a monomial x^a y^b pulls back to degree a+b+1 in u and b in v, so 1D rules
    of degree `degree`+1 suffice.
    """
    if degree < 0:
        raise ValueError(f"degree must be >= 0, got {degree}")
    line = interval_rule(degree + 1)
    u, wu = line.points, line.weights
    U, V = np.meshgrid(u, u, indexing="ij")
    WU, WV = np.meshgrid(wu, wu, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    w = (WU * WV * (1.0 - U)).ravel()
    return QuadratureRule(np.column_stack([x, y]), w, degree)


@lru_cache(maxsize=None)
def quad_rule(degree: int) -> QuadratureRule:
    """Tensor-product Gauss rule on [0,1]^2, exact to degree `degree` per variable."""
    if degree < 0:
        raise ValueError(f"degree must be >= 0, got {degree}")
    line = interval_rule(degree)
    X, Y = np.meshgrid(line.points, line.points, indexing="ij")
    WX, WY = np.meshgrid(line.weights, line.weights, indexing="ij")
    return QuadratureRule(
        np.column_stack([X.ravel(), Y.ravel()]), (WX * WY).ravel(), line.exact_degree
    )


def reference_rule(cell_kind: str, degree: int) -> QuadratureRule:
    if cell_kind == "triangle":
        return triangle_rule(degree)
    if cell_kind == "quadrilateral":
        return quad_rule(degree)
    raise ValueError(f"unknown cell kind {cell_kind!r}")
