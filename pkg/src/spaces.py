"""
Spaces - Degrees of freedom, evaluation and projections for the discrete spaces

Vector spaces interleave components: dof = 2 * node + component. Every node
of a space is numbered; boundary constraints are recorded as constrained
nodes and excluded from the free dofs that form FeFunction.coeffs.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from src.errors import InvalidArgumentError
from src.mesh import EdgeTopology, Triangulation, build_topology
from src.quadrature import (
    edge_rule,
    integrate_cells,
    integrate_edges,
    map_to_cells,
    map_to_edges,
    triangle_rule,
)

logger = logging.getLogger(__name__)

CR_VECTOR = "cr-vector"
DG1_VECTOR = "dg1-vector"
P0_SCALAR = "p0-scalar"
P0_VECTOR = "p0-vector"
P0_BOUNDARY_VECTOR = "p0-boundary-vector"
P0_BOUNDARY_SCALAR = "p0-boundary-scalar"

COMPONENTS = {
    CR_VECTOR: 2,
    DG1_VECTOR: 2,
    P0_SCALAR: 1,
    P0_VECTOR: 2,
    P0_BOUNDARY_VECTOR: 2,
    P0_BOUNDARY_SCALAR: 1,
}

DIRICHLET = "dirichlet"
MEAN_ZERO = "mean-zero"

BARY_TOL = 1e-12

# field(x, y) -> array of shape x.shape (scalar) or x.shape + (2,) (vector)
Field = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class FeSpace:
    """Finite element space on a fixed mesh"""

    kind: str
    mesh: Triangulation
    topology: EdgeTopology
    n_nodes: int
    n_components: int
    cell_nodes: Optional[np.ndarray]
    constrained_nodes: np.ndarray
    mean_zero: bool
    free_dofs: np.ndarray

    @property
    def dof_count(self) -> int:
        return len(self.free_dofs)

    @property
    def full_dof_count(self) -> int:
        return self.n_nodes * self.n_components

    @property
    def constrained_dofs(self) -> np.ndarray:
        return self.node_dofs(self.constrained_nodes).ravel()

    @property
    def is_boundary(self) -> bool:
        return self.kind in (P0_BOUNDARY_VECTOR, P0_BOUNDARY_SCALAR)

    @property
    def is_piecewise_linear(self) -> bool:
        return self.kind in (CR_VECTOR, DG1_VECTOR)

    def node_dofs(self, nodes: np.ndarray) -> np.ndarray:
        """(..., n_components) dof indices of the given nodes"""
        nodes = np.asarray(nodes, dtype=np.int64)
        return nodes[..., None] * self.n_components + np.arange(self.n_components)

    @property
    def cell_dofs(self) -> np.ndarray:
        """(T, local nodes, n_components) dof indices per cell"""
        if self.cell_nodes is None:
            raise InvalidArgumentError(f"Space {self.kind} has no cell dofs.")
        return self.node_dofs(self.cell_nodes)

    @property
    def boundary_edge_ids(self) -> np.ndarray:
        return self.topology.boundary_edge_ids

    @property
    def node_weights(self) -> np.ndarray:
        """Measure attached to each node of a piecewise-constant space"""
        if self.kind in (P0_SCALAR, P0_VECTOR):
            return self.topology.areas
        if self.is_boundary:
            return self.topology.h_e[self.boundary_edge_ids]
        raise InvalidArgumentError(f"Space {self.kind} has no node weights.")

    @property
    def weights(self) -> np.ndarray:
        """Q-inner-product weight of each full dof"""
        return np.repeat(self.node_weights, self.n_components)

    def bound_vector(self, bound) -> np.ndarray:
        """Expand a scalar or per-component bound to every full dof"""
        per_comp = np.broadcast_to(np.asarray(bound, dtype=float), (self.n_components,))
        return np.tile(per_comp, self.n_nodes)


def build_space(
    tri: Triangulation,
    topology: Optional[EdgeTopology],
    kind: str,
    constraints: Sequence[str] = (),
) -> FeSpace:
    """
    Build a finite element space

    Args:
        tri: triangulation
        topology: its edge topology (built when None)
        kind: one of the *_VECTOR / *_SCALAR kind names
        constraints: any of DIRICHLET (CR midpoint values on the boundary are
            prescribed) and MEAN_ZERO (flag read by the saddle solver)

    Returns:
        FeSpace
    """
    if kind not in COMPONENTS:
        raise InvalidArgumentError(f"Unknown space kind: {kind!r}.")
    unknown = set(constraints) - {DIRICHLET, MEAN_ZERO}
    if unknown:
        raise InvalidArgumentError(f"Unknown space constraints: {sorted(unknown)}.")
    if DIRICHLET in constraints and kind != CR_VECTOR:
        raise InvalidArgumentError("Strong Dirichlet constraints apply to CR spaces only.")
    topo = topology if topology is not None else build_topology(tri)
    n_tri = tri.n_triangles

    if kind == CR_VECTOR:
        n_nodes = topo.n_edges
        cell_nodes = topo.edge_of_triangle
    elif kind == DG1_VECTOR:
        n_nodes = 3 * n_tri
        cell_nodes = np.arange(3 * n_tri).reshape(n_tri, 3)
    elif kind in (P0_SCALAR, P0_VECTOR):
        n_nodes = n_tri
        cell_nodes = np.arange(n_tri).reshape(n_tri, 1)
    else:
        n_nodes = len(topo.boundary_edge_ids)
        cell_nodes = None

    nc = COMPONENTS[kind]
    if DIRICHLET in constraints:
        constrained = np.flatnonzero(~topo.interior)
    else:
        constrained = np.zeros(0, dtype=np.int64)
    is_free = np.ones(n_nodes * nc, dtype=bool)
    is_free[(constrained[:, None] * nc + np.arange(nc)).ravel()] = False

    space = FeSpace(
        kind=kind,
        mesh=tri,
        topology=topo,
        n_nodes=n_nodes,
        n_components=nc,
        cell_nodes=cell_nodes,
        constrained_nodes=constrained,
        mean_zero=MEAN_ZERO in constraints,
        free_dofs=np.flatnonzero(is_free),
    )
    logger.debug("space %s: %d free of %d dofs", kind, space.dof_count, space.full_dof_count)
    return space


@dataclass(frozen=True, eq=False)
class FeFunction:
    """Coefficients on the free dofs plus the prescribed values on constrained dofs"""

    space: FeSpace
    coeffs: np.ndarray
    constrained_values: Optional[np.ndarray] = None

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float).ravel()
        if len(coeffs) != self.space.dof_count:
            raise InvalidArgumentError(
                f"Coefficient vector has length {len(coeffs)}, space has {self.space.dof_count} dofs."
            )
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        n_con = self.space.full_dof_count - self.space.dof_count
        values = np.zeros(n_con) if self.constrained_values is None else np.array(
            self.constrained_values, dtype=float
        ).ravel()
        if len(values) != n_con:
            raise InvalidArgumentError(
                f"Expected {n_con} constrained values, got {len(values)}."
            )
        values.setflags(write=False)
        object.__setattr__(self, "constrained_values", values)

    @classmethod
    def from_full(cls, space: FeSpace, full: np.ndarray) -> "FeFunction":
        full = np.asarray(full, dtype=float)
        if len(full) != space.full_dof_count:
            raise InvalidArgumentError(
                f"Full vector has length {len(full)}, space has {space.full_dof_count} dofs."
            )
        return cls(space, full[space.free_dofs], full[space.constrained_dofs])

    @classmethod
    def zeros(cls, space: FeSpace) -> "FeFunction":
        return cls(space, np.zeros(space.dof_count))

    def to_full(self) -> np.ndarray:
        full = np.zeros(self.space.full_dof_count)
        full[self.space.free_dofs] = self.coeffs
        full[self.space.constrained_dofs] = self.constrained_values
        return full

    def node_values(self) -> np.ndarray:
        """(n_nodes, n_components) coefficients"""
        return self.to_full().reshape(self.space.n_nodes, self.space.n_components)


def basis_from_barycentric(kind: str, lam: np.ndarray) -> np.ndarray:
    """
    Local basis values at barycentric points

    Args:
        kind: space kind
        lam: (..., 3) barycentric coordinates

    Returns:
        (..., 3) for CR (psi_i = 1 - 2 lambda_i) and DG1, (..., 1) for P0
    """
    if kind == CR_VECTOR:
        return 1.0 - 2.0 * lam
    if kind == DG1_VECTOR:
        return lam
    if kind in (P0_SCALAR, P0_VECTOR):
        return np.ones(lam.shape[:-1] + (1,))
    raise InvalidArgumentError(f"Space {kind} has no cell basis.")


def basis_gradients(space: FeSpace) -> np.ndarray:
    """(T, 3, 2) constant basis gradients of a piecewise-linear space"""
    grad = space.topology.grad_lambda
    if space.kind == CR_VECTOR:
        return -2.0 * grad
    if space.kind == DG1_VECTOR:
        return grad
    raise InvalidArgumentError(f"Space {space.kind} has no gradients.")


def edge_barycentric(topology: EdgeTopology, edge_ids: np.ndarray, side: int, s: np.ndarray) -> np.ndarray:
    """
    Barycentric coordinates, in the side cell, of the points edges[e,0] + s (edges[e,1] - edges[e,0])

    Returns:
        (n_edges, n_points, 3)
    """
    loc = topology.edge_vertex_local[edge_ids, side]
    lam = np.zeros((len(edge_ids), len(s), 3))
    rows = np.arange(len(edge_ids))[:, None]
    cols = np.arange(len(s))[None, :]
    lam[rows, cols, loc[:, 0][:, None]] = 1.0 - s[None, :]
    lam[rows, cols, loc[:, 1][:, None]] += s[None, :]
    return lam


def cell_values(f: FeFunction, bary: np.ndarray) -> np.ndarray:
    """(T, nq, n_components) values at the same barycentric points of every cell"""
    space = f.space
    local = f.node_values()[space.cell_nodes]
    phi = basis_from_barycentric(space.kind, np.asarray(bary, dtype=float))
    return np.einsum("qi,tic->tqc", phi, local)


def cell_gradients(f: FeFunction) -> np.ndarray:
    """(T, n_components, 2) gradients of a piecewise-linear function"""
    local = f.node_values()[f.space.cell_nodes]
    return np.einsum("tic,tid->tcd", local, basis_gradients(f.space))


def edge_values(f: FeFunction, edge_ids: np.ndarray, side: int, s: np.ndarray) -> np.ndarray:
    """(n_edges, nq, n_components) traces from the given side along edges"""
    space = f.space
    topo = space.topology
    cells = topo.triangles_of_edge[edge_ids, side]
    if np.any(cells < 0):
        raise InvalidArgumentError("Requested trace from a missing side of a boundary edge.")
    lam = edge_barycentric(topo, edge_ids, side, s)
    phi = basis_from_barycentric(space.kind, lam)
    local = f.node_values()[space.cell_nodes[cells]]
    return np.einsum("eqi,eic->eqc", phi, local)


def evaluate(f: FeFunction, T: int, point) -> np.ndarray:
    """
    Evaluate f in triangle T at a barycentric point

    For boundary spaces T is the boundary-edge index and point is ignored.

    Args:
        f: function
        T: triangle index
        point: barycentric coordinates (3,)

    Returns:
        value of shape (n_components,), or a float for scalar spaces
    """
    space = f.space
    values = f.node_values()
    if space.is_boundary:
        if not 0 <= T < space.n_nodes:
            raise InvalidArgumentError(f"Boundary edge index {T} out of range.")
        out = values[T]
    else:
        if not 0 <= T < space.mesh.n_triangles:
            raise InvalidArgumentError(f"Triangle index {T} out of range.")
        lam = np.asarray(point, dtype=float)
        if lam.shape != (3,) or abs(lam.sum() - 1.0) > BARY_TOL or np.any(lam < -BARY_TOL) or np.any(
            lam > 1.0 + BARY_TOL
        ):
            raise InvalidArgumentError(f"Point {point!r} is not inside the triangle.")
        phi = basis_from_barycentric(space.kind, lam)
        out = phi @ values[space.cell_nodes[T]]
    return float(out[0]) if space.n_components == 1 else out


def _sample(g: Field, points: np.ndarray) -> np.ndarray:
    return np.asarray(g(points[..., 0], points[..., 1]), dtype=float)


def _cell_means(g: Field, tri: Triangulation, topo: EdgeTopology, order: int) -> np.ndarray:
    rule = triangle_rule(order)
    values = _sample(g, map_to_cells(tri.vertices[tri.triangles], rule))
    return integrate_cells(values, topo.areas, rule) / topo.areas.reshape(
        (-1,) + (1,) * (values.ndim - 2)
    )


def _edge_means(g: Field, tri: Triangulation, topo: EdgeTopology, edge_ids: np.ndarray, order: int) -> np.ndarray:
    rule = edge_rule(order)
    x = tri.vertices
    points = map_to_edges(x[topo.edges[edge_ids, 0]], x[topo.edges[edge_ids, 1]], rule)
    return np.einsum("q,eq...->e...", rule.weights, _sample(g, points))


def project_p0(
    g: Field, tri: Triangulation, topology: Optional[EdgeTopology] = None, order: int = 6
) -> FeFunction:
    """
    Cell averages of g: the Q-orthogonal projection onto piecewise constants

    Args:
        g: scalar or vector field
        tri: triangulation
        topology: edge topology of tri (built when None)
        order: quadrature order

    Returns:
        FeFunction on a P0 scalar or vector space
    """
    topo = topology if topology is not None else build_topology(tri)
    means = _cell_means(g, tri, topo, order)
    kind = P0_SCALAR if means.ndim == 1 else P0_VECTOR
    return FeFunction(build_space(tri, topo, kind), means.ravel())


def project_boundary_p0(
    g: Field, tri: Triangulation, topology: Optional[EdgeTopology] = None, order: int = 6
) -> FeFunction:
    """Boundary-edge averages of g, ordered like tri.boundary_edges"""
    topo = topology if topology is not None else build_topology(tri)
    means = _edge_means(g, tri, topo, topo.boundary_edge_ids, order)
    kind = P0_BOUNDARY_SCALAR if means.ndim == 1 else P0_BOUNDARY_VECTOR
    return FeFunction(build_space(tri, topo, kind), means.ravel())


def interpolate(g: Field, space: FeSpace, order: int = 6) -> FeFunction:
    """
    Canonical interpolant: CR edge means, DG1 vertex values, P0 cell or edge means

    Constrained dofs receive the interpolated values, which makes this the
    Dirichlet lift for CR spaces.
    """
    tri = space.mesh
    topo = space.topology
    if space.kind == CR_VECTOR:
        full = _edge_means(g, tri, topo, np.arange(topo.n_edges), order)
    elif space.kind == DG1_VECTOR:
        full = _sample(g, tri.vertices[tri.triangles]).reshape(-1, 2)
    elif space.kind in (P0_SCALAR, P0_VECTOR):
        full = _cell_means(g, tri, topo, order)
    else:
        full = _edge_means(g, tri, topo, topo.boundary_edge_ids, order)
    full = np.asarray(full, dtype=float).ravel()
    if len(full) != space.full_dof_count:
        raise InvalidArgumentError(
            f"Field has the wrong number of components for space {space.kind}."
        )
    return FeFunction.from_full(space, full)


def clamp(v, y_a, y_b) -> np.ndarray:
    """
    Componentwise min{y_b, max{y_a, v}}

    Args:
        v: values
        y_a: lower bounds, broadcastable to v (-inf allowed)
        y_b: upper bounds, broadcastable to v (+inf allowed)

    Returns:
        Clamped array
    """
    y_a = np.asarray(y_a, dtype=float)
    y_b = np.asarray(y_b, dtype=float)
    if np.any(y_a >= y_b):
        raise InvalidArgumentError(f"Lower bound {y_a} must be below upper bound {y_b}.")
    return np.minimum(y_b, np.maximum(y_a, np.asarray(v, dtype=float)))


def integral(f: FeFunction) -> np.ndarray:
    """Per-component integral of a piecewise-constant function"""
    return f.space.node_weights @ f.node_values()


def remove_mean(p: FeFunction) -> FeFunction:
    """Subtract the weighted mean of a P0 scalar function"""
    w = p.space.node_weights
    full = p.to_full()
    return FeFunction.from_full(p.space, full - (w @ full) / w.sum())
