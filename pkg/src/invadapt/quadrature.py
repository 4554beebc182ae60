"""Conical-product quadrature on the reference tetrahedron and triangle.

Rules are built from Gauss-Jacobi lines, so all weights are positive
for any exactness degree.  Weights are normalized to sum to one; the
element volume (or face area) multiplies the weighted sum at assembly
time.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@dataclass(frozen=True)
class QuadratureRule:
    """Points in barycentric coordinates, weights summing to one."""

    points: np.ndarray   # (Q, d+1) barycentric coordinates
    weights: np.ndarray  # (Q,), positive, sum 1
    degree: int          # exact for polynomials up to this total degree


def _gauss_01(n: int, alpha: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss rule on [0,1] with weight (1-x)^alpha."""
    if alpha == 0:
        x, w = roots_legendre(n)
    else:
        x, w = roots_jacobi(n, alpha, 0.0)
    return (x + 1.0) / 2.0, w / 2.0**(alpha + 1)


@lru_cache(maxsize=None)
def tet_rule(degree: int) -> QuadratureRule:
    """Quadrature on the reference tet, exact up to ``degree``."""
    if degree < 1:
        raise ValueError("degree must be >= 1")
    n = (degree + 2) // 2
    x1, w1 = _gauss_01(n, 2)
    x2, w2 = _gauss_01(n, 1)
    x3, w3 = _gauss_01(n, 0)
    a, b, c = np.meshgrid(x1, x2, x3, indexing="ij")
    w = (w1[:, None, None] * w2[None, :, None] * w3[None, None, :]).ravel()
    a, b, c = a.ravel(), b.ravel(), c.ravel()
    x = a
    y = b * (1.0 - a)
    z = c * (1.0 - a) * (1.0 - b)
    pts = np.column_stack([1.0 - x - y - z, x, y, z])
    w = w / w.sum()
    return QuadratureRule(pts, w, degree)


@lru_cache(maxsize=None)
def tri_rule(degree: int) -> QuadratureRule:
    """Quadrature on the reference triangle, exact up to ``degree``."""
    if degree < 1:
        raise ValueError("degree must be >= 1")
    n = (degree + 2) // 2
    x1, w1 = _gauss_01(n, 1)
    x2, w2 = _gauss_01(n, 0)
    a, b = np.meshgrid(x1, x2, indexing="ij")
    w = (w1[:, None] * w2[None, :]).ravel()
    a, b = a.ravel(), b.ravel()
    x = a
    y = b * (1.0 - a)
    pts = np.column_stack([1.0 - x - y, x, y])
    w = w / w.sum()
    return QuadratureRule(pts, w, degree)


def monomial_integral_tet(a: int, b: int, c: int) -> float:
    """Exact integral of x^a y^b z^c over the reference tet."""
    from math import factorial

    return (factorial(a) * factorial(b) * factorial(c)
            / factorial(a + b + c + 3))


def monomial_integral_tri(a: int, b: int) -> float:
    """Exact integral of x^a y^b over the reference triangle."""
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)
