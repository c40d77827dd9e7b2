"""
Estimator - Residual a posteriori error indicators for the optimality system
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import pandas as pd

from src.config import MethodConfig
from src.errors import InvalidArgumentError
from src.mesh import EdgeTopology, Triangulation
from src.optctrl import OptimalitySolution, ProblemSpec, project_to_control
from src.quadrature import edge_rule, integrate_cells, map_to_cells, map_to_edges, triangle_rule
from src.spaces import DG1_VECTOR, FeFunction, basis_from_barycentric, cell_gradients, cell_values, edge_barycentric
from src.utils import atomic_write_text

logger = logging.getLogger(__name__)

ESTIMATOR_TERMS = [
    "vol_state",
    "vol_adjoint",
    "div_state",
    "div_adjoint",
    "jump_stress",
    "jump_adjoint_stress",
    "jump_state",
    "jump_adjoint",
    "bd_state",
    "bd_adjoint",
    "consistency",
]
OSCILLATION_TERMS = ["osc_f", "osc_ud"]


@dataclass
class ElementIndicators:
    """Squared indicator terms per triangle; oscillations are kept apart from the total"""

    frame: pd.DataFrame

    @property
    def eta_sq(self) -> np.ndarray:
        """Per-element eta_T^2 used for marking"""
        return self.frame[ESTIMATOR_TERMS].sum(axis=1).to_numpy()

    @property
    def total(self) -> float:
        """Global estimator eta = sqrt(sum_T eta_T^2)"""
        return float(np.sqrt(self.eta_sq.sum()))

    def term(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy()

    def summary(self) -> Dict[str, float]:
        return {name: float(self.frame[name].sum()) for name in ESTIMATOR_TERMS + OSCILLATION_TERMS}

    def to_csv(self, path: str) -> str:
        """Indicator dump: triangle_id, every term, total"""
        out = self.frame.copy()
        out["total"] = self.eta_sq
        return atomic_write_text(path, out.to_csv(index_label="triangle_id", float_format="%.17g"))


def swap_orientation(topology: EdgeTopology) -> EdgeTopology:
    """Same topology with T_+ and T_- exchanged on every interior edge"""
    interior = topology.interior
    tri = topology.triangles_of_edge.copy()
    loc = topology.local_edge.copy()
    evl = topology.edge_vertex_local.copy()
    normals = topology.normals.copy()
    tri[interior] = tri[interior][:, ::-1]
    loc[interior] = loc[interior][:, ::-1]
    evl[interior] = evl[interior][:, ::-1]
    normals[interior] = -normals[interior]
    return dataclasses.replace(
        topology, triangles_of_edge=tri, local_edge=loc, edge_vertex_local=evl, normals=normals
    )


def _traces(f: FeFunction, topo: EdgeTopology, edge_ids: np.ndarray, side: int, s: np.ndarray) -> np.ndarray:
    cells = topo.triangles_of_edge[edge_ids, side]
    lam = edge_barycentric(topo, edge_ids, side, s)
    phi = basis_from_barycentric(f.space.kind, lam)
    local = f.node_values()[f.space.cell_nodes[cells]]
    return np.einsum("eqi,eic->eqc", phi, local)


def _stress(pressure: FeFunction, velocity: FeFunction, sign: float) -> np.ndarray:
    """(T, 2, 2) constant tensors p I + sign * grad(u)"""
    p = pressure.to_full()
    return p[:, None, None] * np.eye(2)[None] + sign * cell_gradients(velocity)


def _distribute(edge_values: np.ndarray, cells: np.ndarray, n_tri: int) -> np.ndarray:
    """Interior edges split half and half, boundary edges go to their own cell"""
    interior = cells[:, 1] >= 0
    share = np.where(interior, 0.5, 1.0) * edge_values
    out = np.bincount(cells[:, 0], weights=share, minlength=n_tri)
    out += np.bincount(cells[interior, 1], weights=share[interior], minlength=n_tri)
    return out


def _oscillation(g, mesh: Triangulation, areas: np.ndarray, h_T: np.ndarray, order: int) -> np.ndarray:
    rule = triangle_rule(order)
    points = map_to_cells(mesh.vertices[mesh.triangles], rule)
    values = np.asarray(g(points[..., 0], points[..., 1]), dtype=float)
    means = integrate_cells(values, areas, rule) / areas[:, None]
    return h_T ** 2 * integrate_cells(np.sum((values - means[:, None, :]) ** 2, axis=-1), areas, rule)


def estimate(
    sol: OptimalitySolution,
    spec: ProblemSpec,
    mesh: Triangulation,
    config: Optional[MethodConfig] = None,
    topology: Optional[EdgeTopology] = None,
) -> ElementIndicators:
    """
    Per-element residual indicators for the state, adjoint and control

    Args:
        sol: converged discrete solution
        spec: problem data
        mesh: the mesh sol lives on
        config: quadrature order and DG penalty
        topology: edge topology of mesh (the solution's own when None)

    Returns:
        ElementIndicators with one row per triangle
    """
    if mesh is not sol.mesh:
        raise InvalidArgumentError("Solution was computed on a different mesh.")
    config = config or MethodConfig()
    topo = topology if topology is not None else sol.u_h.space.topology
    if topo.n_edges != sol.u_h.space.topology.n_edges or len(topo.areas) != mesh.n_triangles:
        raise InvalidArgumentError("Topology does not belong to the solution's mesh.")
    order = config.estimator_order
    n_tri = mesh.n_triangles
    areas = topo.areas
    h_T = topo.h_T
    dg = sol.u_h.space.kind == DG1_VECTOR
    neumann = spec.is_neumann
    terms = {name: np.zeros(n_tri) for name in ESTIMATOR_TERMS}

    # volume residuals
    rule = triangle_rule(order)
    points = map_to_cells(mesh.vertices[mesh.triangles], rule)
    f_values = np.asarray(spec.f(points[..., 0], points[..., 1]), dtype=float)
    if neumann:
        state_residual = f_values
    else:
        state_residual = f_values + sol.y_h.node_values()[:, None, :]
    terms["vol_state"] = h_T ** 2 * integrate_cells(np.sum(state_residual ** 2, axis=-1), areas, rule)
    u_values = cell_values(sol.u_h, rule.points)
    misfit = u_values - np.asarray(spec.u_d(points[..., 0], points[..., 1]), dtype=float)
    terms["vol_adjoint"] = h_T ** 2 * integrate_cells(np.sum(misfit ** 2, axis=-1), areas, rule)

    grad_u = cell_gradients(sol.u_h)
    grad_phi = cell_gradients(sol.phi_h)
    if dg:
        terms["div_state"] = areas * np.trace(grad_u, axis1=1, axis2=2) ** 2
        terms["div_adjoint"] = areas * np.trace(grad_phi, axis1=1, axis2=2) ** 2

    # edge residuals
    erule = edge_rule(order)
    s = erule.points
    h_e = topo.h_e
    cells = topo.triangles_of_edge
    interior_ids = topo.interior_edge_ids
    boundary_ids = topo.boundary_edge_ids
    state_stress = _stress(sol.p_h, sol.u_h, -1.0)
    adjoint_stress = _stress(sol.r_h, sol.phi_h, 1.0)

    def stress_jump(stress: np.ndarray) -> np.ndarray:
        n = topo.normals[interior_ids]
        jump = stress[cells[interior_ids, 0]] - stress[cells[interior_ids, 1]]
        traction = np.einsum("ecd,ed->ec", jump, n)
        values = np.zeros(topo.n_edges)
        values[interior_ids] = h_e[interior_ids] ** 2 * np.sum(traction ** 2, axis=1)
        return values

    terms["jump_stress"] = _distribute(stress_jump(state_stress), cells, n_tri)
    terms["jump_adjoint_stress"] = _distribute(stress_jump(adjoint_stress), cells, n_tri)

    weight = config.sigma ** 2 if dg else 1.0
    x = mesh.vertices

    def solution_jump(f: FeFunction, boundary_data) -> np.ndarray:
        values = np.zeros(topo.n_edges)
        if len(interior_ids):
            jump = _traces(f, topo, interior_ids, 0, s) - _traces(f, topo, interior_ids, 1, s)
            values[interior_ids] = np.einsum("q,eq->e", erule.weights, np.sum(jump ** 2, axis=-1))
        if not neumann and len(boundary_ids):
            trace = _traces(f, topo, boundary_ids, 0, s)
            if boundary_data is not None:
                pts = map_to_edges(x[topo.edges[boundary_ids, 0]], x[topo.edges[boundary_ids, 1]], erule)
                trace = trace - np.asarray(boundary_data(pts[..., 0], pts[..., 1]), dtype=float)
            values[boundary_ids] = np.einsum("q,eq->e", erule.weights, np.sum(trace ** 2, axis=-1))
        # (1/h_e) int_e |.|^2 = mean over the edge of |.|^2
        return weight * values

    terms["jump_state"] = _distribute(solution_jump(sol.u_h, spec.dirichlet), cells, n_tri)
    terms["jump_adjoint"] = _distribute(solution_jump(sol.phi_h, None), cells, n_tri)

    ctrl = sol.y_h.space
    projected = project_to_control(sol.phi_h, ctrl).reshape(ctrl.n_nodes, 2)
    if neumann:
        bd_cells = cells[boundary_ids, 0]
        n = topo.normals[boundary_ids]
        y = sol.y_h.node_values()
        traction = np.einsum("ecd,ed->ec", state_stress[bd_cells], n) + y
        adjoint_traction = np.einsum("ecd,ed->ec", adjoint_stress[bd_cells], n)
        hb = h_e[boundary_ids]
        terms["bd_state"] = np.bincount(bd_cells, weights=hb ** 2 * np.sum(traction ** 2, axis=1), minlength=n_tri)
        terms["bd_adjoint"] = np.bincount(
            bd_cells, weights=hb ** 2 * np.sum(adjoint_traction ** 2, axis=1), minlength=n_tri
        )
        diff = _traces(sol.phi_h, topo, boundary_ids, 0, s) - projected[:, None, :]
        edge_sq = hb * np.einsum("q,eq->e", erule.weights, np.sum(diff ** 2, axis=-1))
        terms["consistency"] = np.bincount(bd_cells, weights=edge_sq, minlength=n_tri)
    else:
        diff = cell_values(sol.phi_h, rule.points) - projected[:, None, :]
        terms["consistency"] = integrate_cells(np.sum(diff ** 2, axis=-1), areas, rule)

    frame = pd.DataFrame(terms)
    frame["osc_f"] = _oscillation(spec.f, mesh, areas, h_T, order)
    frame["osc_ud"] = _oscillation(spec.u_d, mesh, areas, h_T, order)
    frame.index.name = "triangle_id"
    indicators = ElementIndicators(frame)
    if (frame.to_numpy() < 0).any():
        raise InvalidArgumentError("Negative indicator term; inputs are inconsistent.")
    logger.info("estimator: eta = %.4e on %d triangles", indicators.total, n_tri)
    return indicators


def efficiency_index(indicators: ElementIndicators, true_errors) -> float:
    """
    eta / (||u - u_h||_h + ||p - p_h|| + ||phi - phi_h||_h + ||r - r_h|| + ||y - y_h||_Q)

    Args:
        indicators: estimator output
        true_errors: ErrorRecord (its total is used) or the summed error

    Returns:
        Efficiency index
    """
    total = float(getattr(true_errors, "total", true_errors))
    if not total > 0:
        raise InvalidArgumentError("Efficiency index is undefined for a zero error.")
    return indicators.total / total
