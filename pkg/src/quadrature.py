"""
Quadrature - Gauss rules on the reference triangle and the unit segment

Triangle rules are conical products: Gauss-Jacobi in the collapsed direction
times Gauss-Legendre along the fibre. With n points per direction they are
exact up to total degree 2n - 1.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from src.errors import InvalidArgumentError

MIN_ORDER = 1
MAX_ORDER = 10


@dataclass(frozen=True, eq=False)
class QuadRule:
    """Points are barycentric (n, 3) on triangles and parametric (n,) on edges"""

    points: np.ndarray
    weights: np.ndarray
    order: int

    @property
    def size(self) -> int:
        return len(self.weights)


def _check_order(order: int) -> int:
    if isinstance(order, bool) or not isinstance(order, (int, np.integer)):
        raise InvalidArgumentError(f"Quadrature order must be an integer, got {order!r}.")
    if not MIN_ORDER <= order <= MAX_ORDER:
        raise InvalidArgumentError(
            f"Unsupported quadrature order {order}; expected {MIN_ORDER}..{MAX_ORDER}."
        )
    return int(order)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@lru_cache(maxsize=None)
def triangle_rule(order: int) -> QuadRule:
    """
    Rule on the reference triangle (0,0), (1,0), (0,1)

    Args:
        order: total polynomial degree integrated exactly, 1..10

    Returns:
        QuadRule with barycentric points and weights summing to 1/2
    """
    order = _check_order(order)
    n = math.ceil((order + 1) / 2)
    # integral over (0,1) with weight (1 - u)
    tu, wu = roots_jacobi(n, 1.0, 0.0)
    u = 0.5 * (1.0 + tu)
    wu = 0.25 * wu
    tv, wv = roots_legendre(n)
    v = 0.5 * (1.0 + tv)
    wv = 0.5 * wv

    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = uu.ravel()
    y = (vv * (1.0 - uu)).ravel()
    weights = np.outer(wu, wv).ravel()
    points = np.column_stack([1.0 - x - y, x, y])
    return QuadRule(points=_frozen(points), weights=_frozen(weights), order=order)


@lru_cache(maxsize=None)
def edge_rule(order: int) -> QuadRule:
    """
    Gauss-Legendre rule on [0, 1]

    Args:
        order: polynomial degree integrated exactly, 1..10

    Returns:
        QuadRule with parameters in (0, 1) and weights summing to 1
    """
    order = _check_order(order)
    n = math.ceil((order + 1) / 2)
    t, w = roots_legendre(n)
    return QuadRule(points=_frozen(0.5 * (1.0 + t)), weights=_frozen(0.5 * w), order=order)


def map_to_cells(corners: np.ndarray, rule: QuadRule) -> np.ndarray:
    """
    Physical quadrature points of every cell

    Args:
        corners: (T, 3, 2) vertex coordinates
        rule: triangle rule

    Returns:
        (T, nq, 2) points
    """
    return np.einsum("qk,tkd->tqd", rule.points, corners)


def map_to_edges(start: np.ndarray, end: np.ndarray, rule: QuadRule) -> np.ndarray:
    """(E, nq, 2) points on the segments start -> end"""
    s = rule.points
    return start[:, None, :] * (1.0 - s)[None, :, None] + end[:, None, :] * s[None, :, None]


def integrate_cells(values: np.ndarray, areas: np.ndarray, rule: QuadRule) -> np.ndarray:
    """
    Cellwise integrals of quadrature-point values

    Args:
        values: (T, nq, ...) samples at map_to_cells points
        areas: (T,) cell areas
        rule: the rule the samples were taken with

    Returns:
        (T, ...) integrals
    """
    w = 2.0 * rule.weights
    return np.einsum("q,tq...->t...", w, values) * areas.reshape((-1,) + (1,) * (values.ndim - 2))


def integrate_edges(values: np.ndarray, lengths: np.ndarray, rule: QuadRule) -> np.ndarray:
    return np.einsum("q,eq...->e...", rule.weights, values) * lengths.reshape(
        (-1,) + (1,) * (values.ndim - 2)
    )
