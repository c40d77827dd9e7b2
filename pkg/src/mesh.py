"""
Mesh - Structured triangulations, edge topology and newest-vertex bisection

Triangles are stored counterclockwise. Local edge i is the edge opposite
local vertex i, with endpoints (i+1) % 3 and (i+2) % 3. Every triangulation
built here keeps its refinement edge at local edge 0, so local vertex 0 is
the newest vertex.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional

import numpy as np

from src.errors import InvalidArgumentError
from src.utils import atomic_write_text

logger = logging.getLogger(__name__)

GEOMETRY_TOL = 1e-12

# endpoints of local edge i
EDGE_START = np.array([1, 2, 0])
EDGE_END = np.array([2, 0, 1])


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Triangulation:
    """Immutable conforming triangulation with NVB state"""

    vertices: np.ndarray
    triangles: np.ndarray
    refinement_edge: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    reported_h: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, float).reshape(-1, 2))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, "refinement_edge", _frozen(self.refinement_edge, np.int64))
        object.__setattr__(self, "boundary_edges", _frozen(self.boundary_edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "boundary_tags", _frozen(self.boundary_tags, np.int64))
        if len(self.refinement_edge) != len(self.triangles):
            raise InvalidArgumentError("refinement_edge must hold one entry per triangle.")
        if len(self.boundary_tags) != len(self.boundary_edges):
            raise InvalidArgumentError("boundary_tags must hold one entry per boundary edge.")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def signed_areas(self) -> np.ndarray:
        x = self.vertices[self.triangles]
        d1 = x[:, 1] - x[:, 0]
        d2 = x[:, 2] - x[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def diameters(self) -> np.ndarray:
        return edge_lengths(self).max(axis=1)

    @property
    def h(self) -> float:
        """Mesh parameter: the reported 1/n of structured meshes, else the largest diameter"""
        if self.reported_h is not None:
            return float(self.reported_h)
        return float(self.diameters.max())

    @property
    def area(self) -> float:
        return float(self.signed_areas.sum())

    @classmethod
    def from_arrays(
        cls,
        vertices: np.ndarray,
        triangles: np.ndarray,
        boundary_tagger: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        reported_h: Optional[float] = None,
    ) -> "Triangulation":
        """
        Build a triangulation, orienting triangles and choosing the longest
        edge of each as its initial refinement edge

        Args:
            vertices: (V, 2) coordinates
            triangles: (T, 3) vertex indices in any orientation
            boundary_tagger: maps (B, 2) boundary edge midpoints to integer tags
            reported_h: mesh parameter to report instead of the largest diameter

        Returns:
            Triangulation with refinement edges at local edge 0
        """
        vertices = np.asarray(vertices, dtype=float)
        triangles = np.array(triangles, dtype=np.int64)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise InvalidArgumentError("Triangle vertex index out of range.")

        x = vertices[triangles]
        d1 = x[:, 1] - x[:, 0]
        d2 = x[:, 2] - x[:, 0]
        signed = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        if np.any(np.abs(signed) <= GEOMETRY_TOL):
            raise InvalidArgumentError("Degenerate triangle with zero area.")
        flip = signed < 0
        triangles[flip] = triangles[flip][:, [0, 2, 1]]

        lengths = np.linalg.norm(
            vertices[triangles[:, EDGE_END]] - vertices[triangles[:, EDGE_START]], axis=2
        )
        longest = np.argmax(lengths, axis=1)
        triangles = _rotate(triangles, longest)

        boundary = _boundary_edges(triangles)
        if boundary_tagger is None:
            tags = np.ones(len(boundary), dtype=np.int64)
        else:
            midpoints = 0.5 * (vertices[boundary[:, 0]] + vertices[boundary[:, 1]])
            tags = np.asarray(boundary_tagger(midpoints), dtype=np.int64)

        return cls(
            vertices=vertices,
            triangles=triangles,
            refinement_edge=np.zeros(len(triangles), dtype=np.int64),
            boundary_edges=boundary,
            boundary_tags=tags,
            reported_h=reported_h,
        )


@dataclass(frozen=True, eq=False)
class EdgeTopology:
    """
    Edge-based connectivity and per-element geometry

    triangles_of_edge holds (T_+, T_-) with -1 for the missing side of a
    boundary edge; normals hold n_+, the unit normal pointing out of T_+.
    edge_vertex_local[e, s] gives the local indices in side s of the two
    edge endpoints edges[e, 0] and edges[e, 1].
    """

    edges: np.ndarray
    edge_of_triangle: np.ndarray
    triangles_of_edge: np.ndarray
    local_edge: np.ndarray
    edge_vertex_local: np.ndarray
    normals: np.ndarray
    h_e: np.ndarray
    h_T: np.ndarray
    areas: np.ndarray
    grad_lambda: np.ndarray
    boundary_edge_ids: np.ndarray
    edge_tags: np.ndarray
    n_vertices: int

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def interior(self) -> np.ndarray:
        return self.triangles_of_edge[:, 1] >= 0

    @property
    def interior_edge_ids(self) -> np.ndarray:
        return np.flatnonzero(self.interior)

    def edge_index(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Vectorized lookup of the edge joining vertices a and b"""
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        keys = np.minimum(a, b) * self.n_vertices + np.maximum(a, b)
        table = self.edges[:, 0] * self.n_vertices + self.edges[:, 1]
        pos = np.searchsorted(table, keys)
        pos = np.clip(pos, 0, len(table) - 1)
        if np.any(table[pos] != keys):
            raise InvalidArgumentError("Vertex pair is not an edge of the mesh.")
        return pos


def edge_lengths(tri: Triangulation) -> np.ndarray:
    """(T, 3) lengths of the local edges"""
    x = tri.vertices
    t = tri.triangles
    return np.linalg.norm(x[t[:, EDGE_END]] - x[t[:, EDGE_START]], axis=2)


def _rotate(triangles: np.ndarray, first: np.ndarray) -> np.ndarray:
    idx = (np.asarray(first)[:, None] + np.arange(3)[None, :]) % 3
    return triangles[np.arange(len(triangles))[:, None], idx]


def _boundary_edges(triangles: np.ndarray) -> np.ndarray:
    start = triangles[:, EDGE_START].ravel()
    end = triangles[:, EDGE_END].ravel()
    n = int(triangles.max()) + 1 if triangles.size else 0
    keys = np.minimum(start, end) * n + np.maximum(start, end)
    _, first, counts = np.unique(keys, return_index=True, return_counts=True)
    if np.any(counts > 2):
        raise InvalidArgumentError("Edge shared by more than two triangles.")
    pick = first[counts == 1]
    return np.column_stack([start[pick], end[pick]])


def build_topology(tri: Triangulation) -> EdgeTopology:
    """
    Compute edges, edge-triangle incidence, normals and cell geometry

    Args:
        tri: triangulation

    Returns:
        EdgeTopology for tri
    """
    t = tri.triangles
    x = tri.vertices
    n_tri = len(t)
    n_vert = len(x)

    start = t[:, EDGE_START]
    end = t[:, EDGE_END]
    keys = (np.minimum(start, end) * n_vert + np.maximum(start, end)).ravel()
    unique_keys, inverse = np.unique(keys, return_inverse=True)
    edges = np.column_stack([unique_keys // n_vert, unique_keys % n_vert])
    edge_of_triangle = inverse.reshape(n_tri, 3)

    counts = np.bincount(inverse, minlength=len(edges))
    if np.any(counts > 2):
        raise InvalidArgumentError("Edge shared by more than two triangles.")
    order = np.argsort(inverse, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    first = order[offsets]
    second = np.full(len(edges), -1, dtype=np.int64)
    shared = counts == 2
    second[shared] = order[offsets[shared] + 1]

    triangles_of_edge = np.column_stack([first // 3, np.where(second >= 0, second // 3, -1)])
    local_edge = np.column_stack([first % 3, np.where(second >= 0, second % 3, -1)])

    edge_vertex_local = np.full((len(edges), 2, 2), -1, dtype=np.int64)
    for side in range(2):
        has = triangles_of_edge[:, side] >= 0
        cells = triangles_of_edge[has, side]
        loc = local_edge[has, side]
        la = EDGE_START[loc]
        lb = EDGE_END[loc]
        forward = t[cells, la] == edges[has, 0]
        edge_vertex_local[has, side, 0] = np.where(forward, la, lb)
        edge_vertex_local[has, side, 1] = np.where(forward, lb, la)

    plus = triangles_of_edge[:, 0]
    loc = local_edge[:, 0]
    tangent = x[t[plus, EDGE_END[loc]]] - x[t[plus, EDGE_START[loc]]]
    h_e = np.linalg.norm(tangent, axis=1)
    normals = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / h_e[:, None]

    areas = tri.signed_areas
    if np.any(areas <= 0):
        raise InvalidArgumentError("Triangle with non-positive signed area.")
    diff = x[t[:, EDGE_END]] - x[t[:, EDGE_START]]
    grad_lambda = np.stack([-diff[..., 1], diff[..., 0]], axis=-1) / (2.0 * areas[:, None, None])
    h_T = np.linalg.norm(diff, axis=2).max(axis=1)

    topo = EdgeTopology(
        edges=edges,
        edge_of_triangle=edge_of_triangle,
        triangles_of_edge=triangles_of_edge,
        local_edge=local_edge,
        edge_vertex_local=edge_vertex_local,
        normals=normals,
        h_e=h_e,
        h_T=h_T,
        areas=areas,
        grad_lambda=grad_lambda,
        boundary_edge_ids=np.zeros(0, dtype=np.int64),
        edge_tags=np.full(len(edges), -1, dtype=np.int64),
        n_vertices=n_vert,
    )
    if len(tri.boundary_edges):
        ids = topo.edge_index(tri.boundary_edges[:, 0], tri.boundary_edges[:, 1])
        tags = topo.edge_tags.copy()
        tags[ids] = tri.boundary_tags
        object.__setattr__(topo, "boundary_edge_ids", ids)
        object.__setattr__(topo, "edge_tags", tags)
    if np.count_nonzero(~topo.interior) != len(tri.boundary_edges):
        raise InvalidArgumentError("Boundary edge list does not match the triangle adjacency.")
    logger.debug("topology: %d vertices, %d edges, %d triangles", n_vert, len(edges), n_tri)
    return topo


def _check_count(n) -> int:
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgumentError(f"Mesh resolution must be a positive integer, got {n!r}.")
    return int(n)


def _square_tags(mid: np.ndarray) -> np.ndarray:
    x, y = mid[:, 0], mid[:, 1]
    tags = np.zeros(len(mid), dtype=np.int64)
    tags[np.abs(y) < GEOMETRY_TOL] = 1
    tags[np.abs(x - 1.0) < GEOMETRY_TOL] = 2
    tags[np.abs(y - 1.0) < GEOMETRY_TOL] = 3
    tags[np.abs(x) < GEOMETRY_TOL] = 4
    return tags


def _lshape_tags(mid: np.ndarray) -> np.ndarray:
    x, y = mid[:, 0], mid[:, 1]
    tags = np.zeros(len(mid), dtype=np.int64)
    tags[np.abs(y + 1.0) < GEOMETRY_TOL] = 1
    tags[(np.abs(x) < GEOMETRY_TOL) & (y < 0)] = 2
    tags[(np.abs(y) < GEOMETRY_TOL) & (x > 0)] = 3
    tags[np.abs(x - 1.0) < GEOMETRY_TOL] = 4
    tags[np.abs(y - 1.0) < GEOMETRY_TOL] = 5
    tags[np.abs(x + 1.0) < GEOMETRY_TOL] = 6
    return tags


def _grid_triangles(nx: int, ny: int, keep_square: np.ndarray) -> np.ndarray:
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i = i.ravel()[keep_square.ravel()]
    j = j.ravel()[keep_square.ravel()]
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    # bottom-left to top-right diagonal
    return np.stack(
        [np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])], axis=1
    ).reshape(-1, 3)


def generate_unit_square(n: int) -> Triangulation:
    """
    Uniform n x n triangulation of (0,1)^2

    Args:
        n: squares per side

    Returns:
        Triangulation with reported h = 1/n and tags 1..4 (bottom, right, top, left)
    """
    n = _check_count(n)
    xs = np.linspace(0.0, 1.0, n + 1)
    gx, gy = np.meshgrid(xs, xs)
    vertices = np.column_stack([gx.ravel(), gy.ravel()])
    triangles = _grid_triangles(n, n, np.ones((n, n), dtype=bool))
    return Triangulation.from_arrays(vertices, triangles, _square_tags, reported_h=1.0 / n)


def generate_lshape(n: int) -> Triangulation:
    """
    Uniform triangulation of (-1,1)^2 minus (0,1)x(-1,0)

    Args:
        n: squares per unit length

    Returns:
        Triangulation with the reentrant corner at the origin and tags 1..6
    """
    n = _check_count(n)
    m = 2 * n
    xs = np.linspace(-1.0, 1.0, m + 1)
    gx, gy = np.meshgrid(xs, xs)
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    i, j = np.meshgrid(np.arange(m), np.arange(m))
    keep_square = ~((i >= n) & (j < n))
    triangles = _grid_triangles(m, m, keep_square)

    used = np.unique(triangles)
    renumber = np.full(len(vertices), -1, dtype=np.int64)
    renumber[used] = np.arange(len(used))
    return Triangulation.from_arrays(
        vertices[used], renumber[triangles], _lshape_tags, reported_h=1.0 / n
    )


def _as_index_array(marked: Iterable[int], n_tri: int) -> np.ndarray:
    idx = np.unique(np.fromiter((int(k) for k in marked), dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= n_tri):
        raise InvalidArgumentError(
            f"Marked triangle index out of range [0, {n_tri}): {idx[0] if idx[0] < 0 else idx[-1]}."
        )
    return idx


def refine_nvb(tri: Triangulation, marked: Iterable[int]) -> Triangulation:
    """
    Newest-vertex bisection of the marked triangles with conforming closure

    Args:
        tri: triangulation
        marked: indices of triangles to refine

    Returns:
        New triangulation; tri itself when nothing is marked
    """
    idx = _as_index_array(marked, tri.n_triangles)
    if idx.size == 0:
        return tri

    triangles = _rotate(tri.triangles, tri.refinement_edge)
    if np.any(tri.refinement_edge != 0):
        tri = Triangulation(
            vertices=tri.vertices,
            triangles=triangles,
            refinement_edge=np.zeros(len(triangles), dtype=np.int64),
            boundary_edges=tri.boundary_edges,
            boundary_tags=tri.boundary_tags,
            reported_h=tri.reported_h,
        )
    topo = build_topology(tri)
    eot = topo.edge_of_triangle
    ref = eot[:, 0]

    edge_marked = np.zeros(topo.n_edges, dtype=bool)
    edge_marked[ref[idx]] = True
    sweeps = 0
    while True:
        touched = edge_marked[eot].any(axis=1)
        pending = touched & ~edge_marked[ref]
        if not pending.any():
            break
        edge_marked[ref[pending]] = True
        sweeps += 1

    split = np.flatnonzero(edge_marked)
    midpoint = np.full(topo.n_edges, -1, dtype=np.int64)
    midpoint[split] = tri.n_vertices + np.arange(len(split))
    x = tri.vertices
    vertices = np.vstack([x, 0.5 * (x[topo.edges[split, 0]] + x[topo.edges[split, 1]])])

    bisect = edge_marked[ref]
    a, b, c = triangles[bisect, 0], triangles[bisect, 1], triangles[bisect, 2]
    m = midpoint[ref[bisect]]

    pieces: List[np.ndarray] = [triangles[~bisect]]
    # child (m, a, b) has refinement edge (a, b), local edge 2 of the parent
    left = edge_marked[eot[bisect, 2]]
    m2 = midpoint[eot[bisect, 2]]
    pieces.append(np.column_stack([m, a, b])[~left])
    pieces.append(np.column_stack([m2, m, a])[left])
    pieces.append(np.column_stack([m2, b, m])[left])
    # child (m, c, a) has refinement edge (c, a), local edge 1 of the parent
    right = edge_marked[eot[bisect, 1]]
    m3 = midpoint[eot[bisect, 1]]
    pieces.append(np.column_stack([m, c, a])[~right])
    pieces.append(np.column_stack([m3, m, c])[right])
    pieces.append(np.column_stack([m3, a, m])[right])
    new_triangles = np.vstack(pieces)

    bd = tri.boundary_edges
    bd_mid = midpoint[topo.boundary_edge_ids]
    cut = bd_mid >= 0
    new_bd = np.where(
        cut[:, None, None],
        np.stack([np.column_stack([bd[:, 0], bd_mid]), np.column_stack([bd_mid, bd[:, 1]])], axis=1),
        np.stack([bd, np.full_like(bd, -1)], axis=1),
    ).reshape(-1, 2)
    new_tags = np.repeat(tri.boundary_tags, 2)
    keep = new_bd[:, 0] >= 0
    logger.debug(
        "refine_nvb: %d marked, %d edges split, %d closure sweeps, %d -> %d triangles",
        len(idx), len(split), sweeps, tri.n_triangles, len(new_triangles),
    )
    return Triangulation(
        vertices=vertices,
        triangles=new_triangles,
        refinement_edge=np.zeros(len(new_triangles), dtype=np.int64),
        boundary_edges=new_bd[keep],
        boundary_tags=new_tags[keep],
    )


def minimum_angle(tri: Triangulation) -> float:
    """Smallest interior angle of the mesh in radians"""
    x = tri.vertices[tri.triangles]
    angles = []
    for k in range(3):
        u = x[:, (k + 1) % 3] - x[:, k]
        v = x[:, (k + 2) % 3] - x[:, k]
        cos = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        angles.append(np.arccos(np.clip(cos, -1.0, 1.0)))
    return float(np.min(angles))


def mesh_to_text(tri: Triangulation) -> str:
    """Plain-text mesh: "V T B" header, vertices, triangles (newest vertex first), tagged boundary edges"""
    triangles = _rotate(tri.triangles, tri.refinement_edge)
    lines = [f"{tri.n_vertices} {tri.n_triangles} {len(tri.boundary_edges)}"]
    lines += [f"{px:.17g} {py:.17g}" for px, py in tri.vertices]
    lines += [f"{i} {j} {k}" for i, j, k in triangles]
    lines += [f"{i} {j} {tag}" for (i, j), tag in zip(tri.boundary_edges, tri.boundary_tags)]
    return "\n".join(lines) + "\n"


def mesh_from_text(text: str) -> Triangulation:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    try:
        n_v, n_t, n_b = (int(v) for v in rows[0])
        body = rows[1:]
        if len(body) != n_v + n_t + n_b:
            raise ValueError(f"expected {n_v + n_t + n_b} rows, found {len(body)}")
        vertices = np.array(body[:n_v], dtype=float).reshape(-1, 2)
        triangles = np.array(body[n_v:n_v + n_t], dtype=np.int64).reshape(-1, 3)
        boundary = np.array(body[n_v + n_t:], dtype=np.int64).reshape(-1, 3)
    except (IndexError, ValueError) as e:
        raise InvalidArgumentError(f"Malformed mesh text: {e}") from e
    return Triangulation(
        vertices=vertices,
        triangles=triangles,
        refinement_edge=np.zeros(n_t, dtype=np.int64),
        boundary_edges=boundary[:, :2],
        boundary_tags=boundary[:, 2],
    )


def write_mesh(tri: Triangulation, path: str) -> None:
    atomic_write_text(path, mesh_to_text(tri))


def read_mesh(path: str) -> Triangulation:
    with open(path, "r", encoding="utf-8") as f:
        return mesh_from_text(f.read())
