"""
Assembly - Bilinear forms, loads and stability probes for CR/P0 and DG P1/P0

All matrices use the full dof numbering of their spaces (constrained dofs
included). Vector blocks are kron(scalar, I2) because dofs are interleaved.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from src.errors import InvalidArgumentError
from src.quadrature import edge_rule, map_to_cells, map_to_edges, triangle_rule
from src.spaces import (
    CR_VECTOR,
    DG1_VECTOR,
    P0_BOUNDARY_VECTOR,
    P0_SCALAR,
    P0_VECTOR,
    Field,
    FeSpace,
    basis_from_barycentric,
    basis_gradients,
    edge_barycentric,
)
from src.utils import atomic_write_text

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 10.0
COERCIVITY_THRESHOLD = 0.1


def _coo(rows, cols, vals, shape) -> sp.csr_matrix:
    return sp.coo_matrix(
        (np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape
    ).tocsr()


def _vector(scalar: sp.spmatrix) -> sp.csr_matrix:
    return sp.kron(scalar, sp.identity(2), format="csr")


def _require(space: FeSpace, *kinds: str):
    if space.kind not in kinds:
        raise InvalidArgumentError(f"Expected a space of kind {kinds}, got {space.kind}.")


def _same_mesh(a: FeSpace, b: FeSpace):
    if a.mesh is not b.mesh:
        raise InvalidArgumentError("Spaces live on different meshes.")


def _edge_set(space: FeSpace, neumann: bool) -> np.ndarray:
    topo = space.topology
    return topo.interior_edge_ids if neumann else np.arange(topo.n_edges)


def _scalar_cell_matrix(space: FeSpace, local: np.ndarray) -> sp.csr_matrix:
    nodes = space.cell_nodes
    k = nodes.shape[1]
    rows = np.broadcast_to(nodes[:, :, None], (len(nodes), k, k))
    cols = np.broadcast_to(nodes[:, None, :], (len(nodes), k, k))
    return _coo(rows, cols, local, (space.n_nodes, space.n_nodes))


def local_stiffness(space: FeSpace) -> np.ndarray:
    """(T, 3, 3) elementwise integrals of grad(phi_i) . grad(phi_j)"""
    grad = basis_gradients(space)
    return space.topology.areas[:, None, None] * np.einsum("tid,tjd->tij", grad, grad)


def local_mass(space: FeSpace) -> np.ndarray:
    """(T, k, k) elementwise integrals of phi_i phi_j"""
    rule = triangle_rule(2)
    phi = basis_from_barycentric(space.kind, rule.points)
    ref = np.einsum("q,qi,qj->ij", 2.0 * rule.weights, phi, phi)
    return space.topology.areas[:, None, None] * ref[None]


def assemble_diffusion_cr(space: FeSpace) -> sp.csr_matrix:
    """
    Broken-gradient stiffness matrix on a CR space

    Args:
        space: CR vector space

    Returns:
        Symmetric positive semidefinite matrix over the full dofs
    """
    _require(space, CR_VECTOR)
    return _vector(_scalar_cell_matrix(space, local_stiffness(space)))


def _volume_divergence(vel: FeSpace, pres: FeSpace) -> sp.csr_matrix:
    grad = basis_gradients(vel)
    areas = vel.topology.areas
    n_tri = len(areas)
    vals = -areas[:, None, None] * grad
    rows = np.broadcast_to(np.arange(n_tri)[:, None, None], vals.shape)
    return _coo(rows, vel.cell_dofs, vals, (pres.full_dof_count, vel.full_dof_count))


def assemble_divergence_cr(vel_space: FeSpace, pres_space: FeSpace) -> sp.csr_matrix:
    """
    B with B[q, z] = -sum_T int_T q div z

    Args:
        vel_space: CR vector space
        pres_space: P0 scalar space on the same mesh

    Returns:
        (n_pressure, n_velocity) matrix
    """
    _require(vel_space, CR_VECTOR)
    _require(pres_space, P0_SCALAR)
    _same_mesh(vel_space, pres_space)
    return _volume_divergence(vel_space, pres_space)


def _edge_traces(space: FeSpace, edge_ids: np.ndarray, order: int = 2):
    """
    Signed traces used by the jump terms

    Returns:
        jump (n, nq, 6) values of [[phi]] for the three plus and three minus
        nodes, nodes (n, 6), mean_weights (n, 2), rule
    """
    topo = space.topology
    rule = edge_rule(order)
    s = rule.points
    cells = topo.triangles_of_edge[edge_ids]
    interior = cells[:, 1] >= 0
    plus = basis_from_barycentric(space.kind, edge_barycentric(topo, edge_ids, 0, s))
    minus = np.zeros_like(plus)
    if interior.any():
        minus[interior] = basis_from_barycentric(
            space.kind, edge_barycentric(topo, edge_ids[interior], 1, s)
        )
    jump = np.concatenate([plus, -minus], axis=2)
    minus_cells = np.where(interior, cells[:, 1], cells[:, 0])
    nodes = np.concatenate([space.cell_nodes[cells[:, 0]], space.cell_nodes[minus_cells]], axis=1)
    mean_weights = np.where(interior[:, None], 0.5, np.array([1.0, 0.0]))
    return jump, nodes, mean_weights, rule


def dg_diffusion_parts(space: FeSpace, neumann: bool = False) -> Tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
    """
    Scalar SIPG pieces: volume stiffness, consistency and the jump Gram matrix

    The scalar form is volume - consistency + sigma * gram, where
    consistency holds both symmetric flux terms and gram[i, j] is
    sum_e (1/h_e) int_e [[phi_i]] [[phi_j]].

    Args:
        space: DG1 vector space
        neumann: interior edges only when True, all edges otherwise

    Returns:
        (volume, consistency, gram) over the scalar nodes
    """
    _require(space, DG1_VECTOR)
    topo = space.topology
    edge_ids = _edge_set(space, neumann)
    jump, nodes, mean_weights, rule = _edge_traces(space, edge_ids)
    h_e = topo.h_e[edge_ids]
    normal = topo.normals[edge_ids]

    cells = topo.triangles_of_edge[edge_ids]
    minus_cells = np.where(cells[:, 1] >= 0, cells[:, 1], cells[:, 0])
    dn_plus = np.einsum("eid,ed->ei", topo.grad_lambda[cells[:, 0]], normal)
    dn_minus = np.einsum("eid,ed->ei", topo.grad_lambda[minus_cells], normal)
    mean_flux = np.concatenate(
        [mean_weights[:, :1] * dn_plus, mean_weights[:, 1:] * dn_minus], axis=1
    )
    jump_integral = h_e[:, None] * np.einsum("q,eqj->ej", rule.weights, jump)
    cons_local = mean_flux[:, :, None] * jump_integral[:, None, :]
    cons_local = cons_local + np.transpose(cons_local, (0, 2, 1))
    gram_local = np.einsum("q,eqi,eqj->eij", rule.weights, jump, jump)

    rows = np.broadcast_to(nodes[:, :, None], gram_local.shape)
    cols = np.broadcast_to(nodes[:, None, :], gram_local.shape)
    shape = (space.n_nodes, space.n_nodes)
    volume = _scalar_cell_matrix(space, local_stiffness(space))
    return volume, _coo(rows, cols, cons_local, shape), _coo(rows, cols, gram_local, shape)


def assemble_jump_gram(space: FeSpace, neumann: bool = False) -> sp.csr_matrix:
    return _vector(dg_diffusion_parts(space, neumann)[2])


def assemble_diffusion_dg(
    space: FeSpace, sigma: float = DEFAULT_SIGMA, topology=None, neumann: bool = False
) -> sp.csr_matrix:
    """
    Symmetric interior penalty matrix on a DG1 space

    Args:
        space: DG1 vector space
        sigma: penalty parameter, > 0
        topology: optional topology, must be the space's own
        neumann: penalize interior edges only (boundary-control form)

    Returns:
        Symmetric matrix over the full dofs
    """
    if not sigma > 0:
        raise InvalidArgumentError(f"Penalty sigma must be positive, got {sigma}.")
    if topology is not None and topology is not space.topology:
        raise InvalidArgumentError("Topology does not belong to the space's mesh.")
    volume, consistency, gram = dg_diffusion_parts(space, neumann)
    return _vector(volume - consistency + sigma * gram)


def assemble_divergence_dg(
    vel_space: FeSpace, pres_space: FeSpace, topology=None, neumann: bool = False
) -> sp.csr_matrix:
    """
    B with B[q, z] = -sum_T int_T q div z + sum_e int_e {{q}} [[z]]

    On boundary edges {{q}} = q_+ and [[z]] = z_+ . n; the boundary-control
    form uses interior edges only.
    """
    _require(vel_space, DG1_VECTOR)
    _require(pres_space, P0_SCALAR)
    _same_mesh(vel_space, pres_space)
    if topology is not None and topology is not vel_space.topology:
        raise InvalidArgumentError("Topology does not belong to the space's mesh.")
    topo = vel_space.topology
    edge_ids = _edge_set(vel_space, neumann)
    jump, nodes, mean_weights, rule = _edge_traces(vel_space, edge_ids)
    jump_integral = topo.h_e[edge_ids, None] * np.einsum("q,eqj->ej", rule.weights, jump)
    cells = topo.triangles_of_edge[edge_ids]
    pres_cells = np.column_stack([cells[:, 0], np.where(cells[:, 1] >= 0, cells[:, 1], cells[:, 0])])
    normal = topo.normals[edge_ids]

    vals = mean_weights[:, :, None, None] * jump_integral[:, None, :, None] * normal[:, None, None, :]
    rows = np.broadcast_to(pres_cells[:, :, None, None], vals.shape)
    cols = np.broadcast_to(vel_space.node_dofs(nodes)[:, None, :, :], vals.shape)
    edge_part = _coo(rows, cols, vals, (pres_space.full_dof_count, vel_space.full_dof_count))
    return _volume_divergence(vel_space, pres_space) + edge_part


def assemble_divergence_dg_dual(
    vel_space: FeSpace, pres_space: FeSpace, neumann: bool = False
) -> sp.csr_matrix:
    """
    Integrated-by-parts form of the DG divergence: -sum_e int_e [[q]] {{z}} . n

    Interior edges only for the distributed form; all edges, with
    [[q]] = q_+ and {{z}} = z_+ on the boundary, for the boundary-control form.
    """
    _require(vel_space, DG1_VECTOR)
    _require(pres_space, P0_SCALAR)
    _same_mesh(vel_space, pres_space)
    topo = vel_space.topology
    edge_ids = topo.interior_edge_ids if not neumann else np.arange(topo.n_edges)
    rule = edge_rule(2)
    s = rule.points
    cells = topo.triangles_of_edge[edge_ids]
    interior = cells[:, 1] >= 0
    minus_cells = np.where(interior, cells[:, 1], cells[:, 0])

    plus = edge_barycentric(topo, edge_ids, 0, s)
    minus = np.zeros_like(plus)
    if interior.any():
        minus[interior] = edge_barycentric(topo, edge_ids[interior], 1, s)
    z_weight = np.where(interior, 0.5, 1.0)
    mean = np.concatenate([z_weight[:, None, None] * plus, 0.5 * minus], axis=2)
    mean_integral = topo.h_e[edge_ids, None] * np.einsum("q,eqj->ej", rule.weights, mean)
    nodes = np.concatenate([vel_space.cell_nodes[cells[:, 0]], vel_space.cell_nodes[minus_cells]], axis=1)
    q_sign = np.column_stack([np.ones(len(edge_ids)), np.where(interior, -1.0, 0.0)])
    normal = topo.normals[edge_ids]

    vals = -q_sign[:, :, None, None] * mean_integral[:, None, :, None] * normal[:, None, None, :]
    rows = np.broadcast_to(np.column_stack([cells[:, 0], minus_cells])[:, :, None, None], vals.shape)
    cols = np.broadcast_to(vel_space.node_dofs(nodes)[:, None, :, :], vals.shape)
    return _coo(rows, cols, vals, (pres_space.full_dof_count, vel_space.full_dof_count))


def assemble_diffusion(space: FeSpace, sigma: float = DEFAULT_SIGMA, neumann: bool = False) -> sp.csr_matrix:
    if space.kind == CR_VECTOR:
        return assemble_diffusion_cr(space)
    return assemble_diffusion_dg(space, sigma, neumann=neumann)


def assemble_divergence(vel_space: FeSpace, pres_space: FeSpace, neumann: bool = False) -> sp.csr_matrix:
    if vel_space.kind == CR_VECTOR:
        return assemble_divergence_cr(vel_space, pres_space)
    return assemble_divergence_dg(vel_space, pres_space, neumann=neumann)


def assemble_velocity_mass(space: FeSpace) -> sp.csr_matrix:
    """L2 Gram matrix of a CR or DG1 vector space"""
    _require(space, CR_VECTOR, DG1_VECTOR)
    return _vector(_scalar_cell_matrix(space, local_mass(space)))


def assemble_control_mass(space: FeSpace) -> sp.csr_matrix:
    """Diagonal Q Gram matrix of a piecewise-constant control space"""
    return sp.diags(space.weights, format="csr")


def assemble_control_coupling(vel_space: FeSpace, control_space: FeSpace) -> sp.csr_matrix:
    """
    C with C[z, y] = <y, E_h z>_Q

    Args:
        vel_space: CR or DG1 vector space
        control_space: P0 vector space (distributed) or boundary P0 vector
            space (boundary control)

    Returns:
        (n_velocity, n_control) matrix
    """
    _require(vel_space, CR_VECTOR, DG1_VECTOR)
    _require(control_space, P0_VECTOR, P0_BOUNDARY_VECTOR)
    _same_mesh(vel_space, control_space)
    topo = vel_space.topology
    if control_space.kind == P0_VECTOR:
        rule = triangle_rule(1)
        phi = basis_from_barycentric(vel_space.kind, rule.points)
        moments = topo.areas[:, None] * (2.0 * rule.weights @ phi)[None, :]
        vel_nodes = vel_space.cell_nodes
        ctrl_nodes = np.broadcast_to(np.arange(len(moments))[:, None], moments.shape)
    else:
        edge_ids = control_space.boundary_edge_ids
        rule = edge_rule(2)
        phi = basis_from_barycentric(
            vel_space.kind, edge_barycentric(topo, edge_ids, 0, rule.points)
        )
        moments = topo.h_e[edge_ids, None] * np.einsum("q,eqi->ei", rule.weights, phi)
        vel_nodes = vel_space.cell_nodes[topo.triangles_of_edge[edge_ids, 0]]
        ctrl_nodes = np.broadcast_to(np.arange(len(edge_ids))[:, None], moments.shape)
    rows = vel_space.node_dofs(vel_nodes)
    cols = control_space.node_dofs(ctrl_nodes)
    vals = np.broadcast_to(moments[..., None], rows.shape)
    return _coo(rows, cols, vals, (vel_space.full_dof_count, control_space.full_dof_count))


def assemble_load(g: Optional[Field], space: FeSpace, order: int = 6) -> np.ndarray:
    """
    Load vector <g, phi> over the full dofs

    Args:
        g: field matching the space's component count, or None for zero
        space: CR, DG1 or P0 space
        order: quadrature order

    Returns:
        Vector of length space.full_dof_count
    """
    if g is None:
        return np.zeros(space.full_dof_count)
    tri = space.mesh
    rule = triangle_rule(order)
    points = map_to_cells(tri.vertices[tri.triangles], rule)
    values = np.asarray(g(points[..., 0], points[..., 1]), dtype=float)
    values = values.reshape(values.shape[:2] + (space.n_components,))
    phi = basis_from_barycentric(space.kind, rule.points)
    local = np.einsum("q,qi,tqc->tic", 2.0 * rule.weights, phi, values)
    local *= space.topology.areas[:, None, None]
    return np.bincount(
        space.cell_dofs.ravel(), weights=local.ravel(), minlength=space.full_dof_count
    )


def _boundary_samples(g: Field, space: FeSpace, order: int):
    topo = space.topology
    tri = space.mesh
    edge_ids = topo.boundary_edge_ids
    rule = edge_rule(order)
    points = map_to_edges(
        tri.vertices[topo.edges[edge_ids, 0]], tri.vertices[topo.edges[edge_ids, 1]], rule
    )
    return edge_ids, rule, np.asarray(g(points[..., 0], points[..., 1]), dtype=float)


def assemble_nitsche_load(g: Field, space: FeSpace, sigma: float, order: int = 6) -> np.ndarray:
    """
    Weak Dirichlet data for the DG form:
    sum over boundary edges of -int (grad z n) . g + sigma/h_e int g . z
    """
    _require(space, DG1_VECTOR)
    topo = space.topology
    edge_ids, rule, values = _boundary_samples(g, space, order)
    cells = topo.triangles_of_edge[edge_ids, 0]
    phi = edge_barycentric(topo, edge_ids, 0, rule.points)
    dn = np.einsum("eid,ed->ei", topo.grad_lambda[cells], topo.normals[edge_ids])
    h = topo.h_e[edge_ids]
    flux = -h[:, None, None] * dn[:, :, None] * np.einsum("q,eqc->ec", rule.weights, values)[:, None, :]
    penalty = sigma * np.einsum("q,eqi,eqc->eic", rule.weights, phi, values)
    local = flux + penalty
    dofs = space.node_dofs(space.cell_nodes[cells])
    return np.bincount(dofs.ravel(), weights=local.ravel(), minlength=space.full_dof_count)


def assemble_boundary_flux(g: Field, pres_space: FeSpace, order: int = 6) -> np.ndarray:
    """Per-cell sum of int_e g . n over the cell's boundary edges"""
    _require(pres_space, P0_SCALAR)
    topo = pres_space.topology
    edge_ids, rule, values = _boundary_samples(g, pres_space, order)
    flux = topo.h_e[edge_ids] * np.einsum("q,eqc,ec->e", rule.weights, values, topo.normals[edge_ids])
    return np.bincount(
        topo.triangles_of_edge[edge_ids, 0], weights=flux, minlength=pres_space.full_dof_count
    )


def assemble_mean_rows(space: FeSpace) -> sp.csr_matrix:
    """
    Integral functionals used as mean-value constraints

    Returns:
        (n_components, full dofs) rows; row c integrates component c
    """
    if space.kind == P0_SCALAR:
        return sp.csr_matrix(space.topology.areas[None, :])
    _require(space, CR_VECTOR, DG1_VECTOR)
    rule = triangle_rule(1)
    phi = basis_from_barycentric(space.kind, rule.points)
    local = space.topology.areas[:, None] * (2.0 * rule.weights @ phi)[None, :]
    rows = np.broadcast_to(np.arange(2), space.cell_dofs.shape)
    vals = np.broadcast_to(local[..., None], rows.shape)
    return _coo(rows, space.cell_dofs, vals, (2, space.full_dof_count))


def energy_matrix(space: FeSpace, neumann: bool = False) -> sp.csr_matrix:
    """Matrix of the energy norm: broken H1 seminorm, plus the jump Gram for DG"""
    if space.kind == CR_VECTOR:
        return assemble_diffusion_cr(space)
    volume, _, gram = dg_diffusion_parts(space, neumann)
    return _vector(volume + gram)


def write_coo(matrix: sp.spmatrix, path: str) -> str:
    """Dump a matrix as "row col value" lines"""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}"]
    lines += [f"{r} {c} {v:.17g}" for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order])]
    return atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass
class ProbeResult:
    """Outcome of a randomized stability probe and its exact eigenvalue counterpart"""

    name: str
    sample_value: float
    exact_value: float
    passed: bool


def _scalar_free_basis(space: FeSpace, neumann: bool) -> np.ndarray:
    """Columns spanning the constrained scalar subspace used by the probes"""
    n = space.n_nodes
    free = np.ones(n, dtype=bool)
    free[space.constrained_nodes] = False
    basis = np.eye(n)[:, free]
    if neumann:
        weights = assemble_mean_rows(space)[0].toarray().ravel()[0::2][free]
        basis = basis @ sla.null_space(weights[None, :])
    return basis


def _dense_scalar(space: FeSpace, sigma: float, neumann: bool):
    if space.kind == CR_VECTOR:
        stiffness = _scalar_cell_matrix(space, local_stiffness(space)).toarray()
        return stiffness, stiffness
    volume, consistency, gram = dg_diffusion_parts(space, neumann)
    a = (volume - consistency + sigma * gram).toarray()
    return a, (volume + gram).toarray()


def coercivity_probe(
    space: FeSpace,
    sigma: float = DEFAULT_SIGMA,
    neumann: bool = False,
    samples: int = 100,
    rng: Optional[np.random.Generator] = None,
    threshold: float = COERCIVITY_THRESHOLD,
) -> ProbeResult:
    """
    Rayleigh quotients v'Av / ||v||_h^2 on the constrained subspace

    Args:
        space: CR or DG1 vector space
        sigma: DG penalty
        neumann: boundary-control form with mean-zero velocities
        samples: random vectors to try
        rng: random generator
        threshold: pass mark for the sampled minimum

    Returns:
        ProbeResult with the sampled minimum and the smallest generalized eigenvalue
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    a, norm = _dense_scalar(space, sigma, neumann)
    z = _scalar_free_basis(space, neumann)
    a_z = z.T @ a @ z
    n_z = z.T @ norm @ z
    v = rng.standard_normal((z.shape[1], samples))
    quotients = np.einsum("is,ij,js->s", v, a_z, v) / np.einsum("is,ij,js->s", v, n_z, v)
    exact = float(sla.eigh(a_z, n_z, eigvals_only=True)[0])
    sample_min = float(quotients.min())
    result = ProbeResult("coercivity", sample_min, exact, sample_min > threshold and exact > 0)
    logger.info("coercivity probe: sampled min %.4g, exact min %.4g", sample_min, exact)
    return result


def inf_sup_probe(
    vel_space: FeSpace, pres_space: FeSpace, sigma: float = DEFAULT_SIGMA, neumann: bool = False
) -> ProbeResult:
    """
    Discrete inf-sup constant: square root of the smallest positive
    generalized eigenvalue of B N^-1 B' against the pressure mass,
    N being the energy-norm matrix on the free velocity dofs
    """
    _same_mesh(vel_space, pres_space)
    free = vel_space.free_dofs
    norm = energy_matrix(vel_space, neumann)[free][:, free].toarray()
    if neumann:
        g = assemble_mean_rows(vel_space)[:, free].toarray()
        norm = norm + g.T @ g / vel_space.mesh.area
    b = assemble_divergence(vel_space, pres_space, neumann)[:, free].toarray()
    schur = b @ sla.solve(norm, b.T, assume_a="pos")
    mass = np.diag(pres_space.topology.areas)
    eig = sla.eigh(schur, mass, eigvals_only=True)
    positive = eig[eig > 1e-10 * max(eig.max(), 1.0)]
    beta = float(np.sqrt(positive.min())) if positive.size else 0.0
    logger.info("inf-sup probe: beta_h = %.4g", beta)
    return ProbeResult("inf-sup", beta, beta, beta > 0)


def poincare_probe(
    space: FeSpace,
    sigma: float = DEFAULT_SIGMA,
    neumann: bool = False,
    samples: int = 100,
    rng: Optional[np.random.Generator] = None,
) -> ProbeResult:
    """Constant C in ||v||_W <= C ||v||_h, sampled and exact"""
    rng = rng if rng is not None else np.random.default_rng(0)
    _, norm = _dense_scalar(space, sigma, neumann)
    mass = _scalar_cell_matrix(space, local_mass(space)).toarray()
    z = _scalar_free_basis(space, neumann)
    m_z = z.T @ mass @ z
    n_z = z.T @ norm @ z
    v = rng.standard_normal((z.shape[1], samples))
    ratios = np.einsum("is,ij,js->s", v, m_z, v) / np.einsum("is,ij,js->s", v, n_z, v)
    exact = float(np.sqrt(sla.eigh(m_z, n_z, eigvals_only=True)[-1]))
    sample = float(np.sqrt(ratios.max()))
    logger.info("Poincare probe: sampled %.4g, exact %.4g", sample, exact)
    return ProbeResult("poincare", sample, exact, np.isfinite(exact))
