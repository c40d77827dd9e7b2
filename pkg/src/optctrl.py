"""
Optimal Control - Discrete optimality system and primal-dual active-set solver

The coupled state/adjoint/control system is solved monolithically. With
state unknowns s = (u, p, multipliers) and the Stokes block K0, the
symmetric matrix per active-set iteration is

    [ M    K0    0      0  ] [ s  ]   [ b_ud       ]
    [ K0   0    -C_I    0  ] [ w  ] = [ F + C_A y_A ]
    [ 0   -C_I'  lam Q_I g ] [ y_I]   [ 0          ]
    [ 0    0     g'     0  ] [ mu ]   [ compat.    ]

where w = (-phi, r, ...) and the last row only exists for boundary control.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import scipy.sparse as sp

from src.assembly import (
    assemble_boundary_flux,
    assemble_control_coupling,
    assemble_control_mass,
    assemble_diffusion,
    assemble_divergence,
    assemble_load,
    assemble_mean_rows,
    assemble_nitsche_load,
    assemble_velocity_mass,
)
from src.config import MethodConfig
from src.errors import InvalidArgumentError, IterationFailureError
from src.mesh import Triangulation, build_topology, generate_lshape, generate_unit_square
from src.quadrature import triangle_rule, map_to_cells, integrate_cells
from src.saddle_solver import BlockSystem, solve_symmetric_indefinite
from src.spaces import (
    CR_VECTOR,
    DG1_VECTOR,
    DIRICHLET,
    MEAN_ZERO,
    P0_BOUNDARY_VECTOR,
    P0_SCALAR,
    P0_VECTOR,
    Field,
    FeFunction,
    FeSpace,
    build_space,
    cell_values,
    clamp,
    interpolate,
)

logger = logging.getLogger(__name__)

DISTRIBUTED = "distributed"
NEUMANN = "neumann"

BISECTION_STEPS = 200


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Model problem data: min 1/2 ||u - u_d||^2 + lam/2 ||y||_Q^2 subject to Stokes"""

    kind: str
    f: Field
    u_d: Field
    lam: float = 1.0
    ya: Any = -np.inf
    yb: Any = np.inf
    dirichlet: Optional[Field] = None
    domain: Optional[str] = None
    name: str = "custom"

    def __post_init__(self):
        if self.kind not in (DISTRIBUTED, NEUMANN):
            raise InvalidArgumentError(f"Unknown problem kind {self.kind!r}.")
        if not self.lam > 0:
            raise InvalidArgumentError(f"Regularization lam must be positive, got {self.lam}.")
        lower = np.broadcast_to(np.asarray(self.ya, dtype=float), (2,)).copy()
        upper = np.broadcast_to(np.asarray(self.yb, dtype=float), (2,)).copy()
        if np.any(lower >= upper):
            raise InvalidArgumentError(f"Bounds must satisfy ya < yb, got {lower} and {upper}.")
        object.__setattr__(self, "ya", lower)
        object.__setattr__(self, "yb", upper)
        if self.dirichlet is not None and self.kind == NEUMANN:
            raise InvalidArgumentError("Dirichlet data is only used by the distributed problem.")
        if self.kind == NEUMANN and self.domain is not None:
            mesh = {"square": generate_unit_square, "lshape": generate_lshape}[self.domain](8)
            check_neumann_compatibility(self, force_integral(self, mesh), boundary_length(mesh))

    @property
    def is_neumann(self) -> bool:
        return self.kind == NEUMANN


def boundary_length(mesh: Triangulation) -> float:
    bd = mesh.boundary_edges
    return float(np.linalg.norm(mesh.vertices[bd[:, 1]] - mesh.vertices[bd[:, 0]], axis=1).sum())


def force_integral(spec: ProblemSpec, mesh: Triangulation, order: int = 6) -> np.ndarray:
    """Per-component integral of f over the mesh"""
    rule = triangle_rule(order)
    points = map_to_cells(mesh.vertices[mesh.triangles], rule)
    values = np.asarray(spec.f(points[..., 0], points[..., 1]), dtype=float)
    return integrate_cells(values, np.abs(mesh.signed_areas), rule).sum(axis=0)


def check_neumann_compatibility(spec: ProblemSpec, f_integral: np.ndarray, gamma: float):
    """ya <= -(1/|Gamma|) int f <= yb componentwise"""
    level = -np.asarray(f_integral) / gamma
    if np.any(level < spec.ya) or np.any(level > spec.yb):
        raise InvalidArgumentError(
            f"Boundary control cannot balance the load: -int f/|Gamma| = {level} "
            f"is outside [{spec.ya}, {spec.yb}]."
        )


@dataclass(eq=False)
class OptimalitySolution:
    """Converged discrete state, adjoint and control with the final active sets"""

    u_h: FeFunction
    p_h: FeFunction
    phi_h: FeFunction
    r_h: FeFunction
    y_h: FeFunction
    active_lower: np.ndarray
    active_upper: np.ndarray
    iterations: int
    kkt_residual: float
    shift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    history: List[Dict[str, int]] = field(default_factory=list)

    @property
    def mesh(self) -> Triangulation:
        return self.u_h.space.mesh

    @property
    def ndof(self) -> int:
        """Velocity + pressure + control unknowns"""
        return self.u_h.space.dof_count + self.p_h.space.dof_count + self.y_h.space.dof_count


def _control_space_kind(spec: ProblemSpec) -> str:
    return P0_BOUNDARY_VECTOR if spec.is_neumann else P0_VECTOR


def build_spaces(spec: ProblemSpec, mesh: Triangulation, method: str, topology=None):
    """
    Velocity, pressure and control spaces of a problem

    Returns:
        (velocity, pressure, control) FeSpaces sharing one topology
    """
    topo = topology if topology is not None else build_topology(mesh)
    vel_kind = CR_VECTOR if method == "cr" else DG1_VECTOR
    if spec.is_neumann:
        vel_constraints = (MEAN_ZERO,)
    elif vel_kind == CR_VECTOR:
        vel_constraints = (DIRICHLET,)
    else:
        vel_constraints = ()
    vel = build_space(mesh, topo, vel_kind, vel_constraints)
    pres = build_space(mesh, topo, P0_SCALAR, () if spec.is_neumann else (MEAN_ZERO,))
    ctrl = build_space(mesh, topo, _control_space_kind(spec))
    return vel, pres, ctrl


def project_to_control(phi_h: FeFunction, control_space: FeSpace) -> np.ndarray:
    """Pi_h E_h phi_h: cell or boundary-edge averages, as full control coefficients"""
    coupling = assemble_control_coupling(phi_h.space, control_space)
    return (coupling.T @ phi_h.to_full()) / control_space.weights


class OptimalitySystem:
    """Spaces, matrices and data of the discrete optimality system on one mesh"""

    def __init__(self, spec: ProblemSpec, mesh: Triangulation, config: MethodConfig):
        self.spec = spec
        self.mesh = mesh
        self.config = config
        self.topology = build_topology(mesh)
        neumann = spec.is_neumann
        self.vel, self.pres, self.ctrl = build_spaces(spec, mesh, config.method, self.topology)
        vel_kind = self.vel.kind

        A = assemble_diffusion(self.vel, config.sigma, neumann)
        B = assemble_divergence(self.vel, self.pres, neumann)
        M = assemble_velocity_mass(self.vel)
        C = assemble_control_coupling(self.vel, self.ctrl)
        self.coupling = C
        load = assemble_load(spec.f, self.vel, config.load_order)
        desired = assemble_load(spec.u_d, self.vel, config.load_order)
        self.f_integral = np.array([load[0::2].sum(), load[1::2].sum()])

        free = self.vel.free_dofs
        con = self.vel.constrained_dofs
        self.lift = np.zeros(len(con))
        div_rhs = np.zeros(self.pres.full_dof_count)
        if spec.dirichlet is not None and not neumann:
            if vel_kind == CR_VECTOR:
                self.lift = interpolate(spec.dirichlet, self.vel, config.load_order).constrained_values
            else:
                load = load + assemble_nitsche_load(spec.dirichlet, self.vel, config.sigma, config.load_order)
                div_rhs = assemble_boundary_flux(spec.dirichlet, self.pres, config.load_order)

        self.A_ff = A[free][:, free]
        self.B_f = B[:, free]
        self.M_ff = M[free][:, free]
        self.C_f = C[free]
        self.q_weights = self.ctrl.weights
        self.Q = assemble_control_mass(self.ctrl)
        self.ya_vec = self.ctrl.bound_vector(spec.ya)
        self.yb_vec = self.ctrl.bound_vector(spec.yb)

        self.state_rhs_u = load[free] - A[free][:, con] @ self.lift
        self.state_rhs_p = div_rhs - B[:, con] @ self.lift
        self.adjoint_rhs_u = desired[free] - M[free][:, con] @ self.lift

        if neumann:
            gamma = self.q_weights[0::2].sum()
            check_neumann_compatibility(spec, self.f_integral, gamma)
            self.n_mult = 2
            means = assemble_mean_rows(self.vel)[:, free]
            self.k0_extra = {("u", "c"): means.T.tocsr(), ("c", "u"): means.tocsr()}
        else:
            self.n_mult = 1
            means = assemble_mean_rows(self.pres)
            self.k0_extra = {("p", "c"): means.T.tocsr(), ("c", "p"): means.tocsr()}

        self.sizes = {"u": len(free), "p": self.pres.full_dof_count, "c": self.n_mult}
        logger.debug(
            "optimality system: %s/%s, %d velocity, %d pressure, %d control dofs",
            spec.kind, config.method, self.vel.dof_count, self.pres.dof_count, self.ctrl.dof_count,
        )

    def _k0(self, rows: str = "", cols: str = "") -> Dict:
        blocks = {
            ("u", "u"): self.A_ff,
            ("u", "p"): self.B_f.T.tocsr(),
            ("p", "u"): self.B_f,
        }
        blocks.update(self.k0_extra)
        return {(r + rows, c + cols): block for (r, c), block in blocks.items()}

    def _solve_k0(self, rhs_u: np.ndarray, rhs_p: np.ndarray) -> np.ndarray:
        system = BlockSystem.from_blocks(
            ["u", "p", "c"], self.sizes, self._k0(), {"u": rhs_u, "p": rhs_p}
        )
        x = solve_symmetric_indefinite(system, self.config.solver_tol)
        return system.block(x, "u"), system.block(x, "p")

    def solve_state(self, y_full: np.ndarray):
        """
        Stokes solve for a given control

        Returns:
            (full velocity coefficients including the lift, pressure)
        """
        u_f, p = self._solve_k0(self.state_rhs_u + self.C_f @ y_full, self.state_rhs_p)
        return self.velocity_full(u_f, self.lift), p

    def solve_adjoint(self, u_full: np.ndarray):
        """Adjoint Stokes solve for a given state; returns (full phi, r)"""
        u_f = u_full[self.vel.free_dofs]
        t_u, t_p = self._solve_k0(self.M_ff @ u_f - self.adjoint_rhs_u, np.zeros(self.sizes["p"]))
        return self.velocity_full(t_u, np.zeros(len(self.lift))), -t_p

    def velocity_full(self, free_values: np.ndarray, constrained: np.ndarray) -> np.ndarray:
        full = np.zeros(self.vel.full_dof_count)
        full[self.vel.free_dofs] = free_values
        full[self.vel.constrained_dofs] = constrained
        return full

    def reduced_cost(self, y_full: np.ndarray) -> float:
        """Discrete cost up to the constant 1/2 ||u_d||^2, with the induced state"""
        u_full, _ = self.solve_state(y_full)
        M = assemble_velocity_mass(self.vel)
        desired = assemble_load(self.spec.u_d, self.vel, self.config.load_order)
        tracking = 0.5 * u_full @ (M @ u_full) - desired @ u_full
        return float(tracking + 0.5 * self.spec.lam * y_full @ (self.Q @ y_full))

    def control_projection(self, phi_full: np.ndarray) -> np.ndarray:
        return (self.coupling.T @ phi_full) / self.q_weights

    def shift_vector(self, mu: np.ndarray) -> np.ndarray:
        return np.tile(mu, self.ctrl.n_nodes)

    def candidate(self, phi_full: np.ndarray, mu: np.ndarray) -> np.ndarray:
        """-(Pi_h phi + mu) / lam"""
        return -(self.control_projection(phi_full) + self.shift_vector(mu)) / self.spec.lam

    def balancing_shift(self, phi_full: np.ndarray) -> np.ndarray:
        """
        Per-component mu with int_Gamma clamp(-(Pi_h phi + mu)/lam) + int f = 0

        Zero for the distributed problem.
        """
        if not self.spec.is_neumann:
            return np.zeros(2)
        lam = self.spec.lam
        v = (-self.control_projection(phi_full) / lam).reshape(-1, 2)
        w = self.q_weights[0::2]
        mu = np.empty(2)
        for k in range(2):
            c = balancing_shift(v[:, k], w, self.spec.ya[k], self.spec.yb[k], -self.f_integral[k])
            mu[k] = -lam * c
        return mu

    def balance_defect(self, y_full: np.ndarray) -> np.ndarray:
        """int_Gamma y + int f per component; zero for the distributed problem"""
        if not self.spec.is_neumann:
            return np.zeros(2)
        return self.q_weights[0::2] @ y_full.reshape(-1, 2) + self.f_integral

    def solve_with_active_sets(self, lower: np.ndarray, upper: np.ndarray, mu: Optional[np.ndarray] = None) -> Dict[str, Any]:
        """
        One monolithic solve with the control fixed at its bounds on the active sets

        Args:
            lower: mask of control dofs fixed at ya
            upper: mask of control dofs fixed at yb
            mu: previous compatibility multipliers, kept for components
                without inactive dofs

        Returns:
            dict with u, phi (full), p, r, y (full control), mu and residual
        """
        lam = self.spec.lam
        inactive = ~(lower | upper)
        y_full = np.zeros(self.ctrl.full_dof_count)
        y_full[lower] = self.ya_vec[lower]
        y_full[upper] = self.yb_vec[upper]
        active = ~inactive
        C_I = self.C_f[:, np.flatnonzero(inactive)]

        mu_prev = np.zeros(2) if mu is None else np.asarray(mu, dtype=float)
        comp = np.arange(self.ctrl.full_dof_count) % 2
        solved_comps: List[int] = []
        g_cols = []
        mu_rhs = []
        if self.spec.is_neumann:
            for k in range(2):
                if np.any(inactive & (comp == k)):
                    solved_comps.append(k)
                    g_k = np.where(comp == k, self.q_weights, 0.0)
                    g_cols.append(g_k[inactive])
                    mu_rhs.append(-self.f_integral[k] - g_k[active] @ y_full[active])

        sizes = dict(self.sizes)
        sizes.update({"uh": sizes["u"], "ph": sizes["p"], "ch": sizes["c"]})
        sizes["y"] = int(inactive.sum())
        sizes["mu"] = len(solved_comps)

        blocks = {("u", "u"): self.M_ff}
        blocks.update(self._k0("", "h"))
        blocks.update(self._k0("h", ""))
        blocks[("uh", "y")] = -C_I
        blocks[("y", "uh")] = -C_I.T.tocsr()
        idx = np.flatnonzero(inactive)
        blocks[("y", "y")] = (lam * self.Q[idx][:, idx]).tocsr()
        if solved_comps:
            g = sp.csr_matrix(np.column_stack(g_cols))
            blocks[("y", "mu")] = g
            blocks[("mu", "y")] = g.T.tocsr()

        rhs = {
            "u": self.adjoint_rhs_u,
            "uh": self.state_rhs_u + self.C_f[:, np.flatnonzero(active)] @ y_full[active],
            "ph": self.state_rhs_p,
            "mu": np.array(mu_rhs),
        }
        system = BlockSystem.from_blocks(
            ["u", "p", "c", "uh", "ph", "ch", "y", "mu"], sizes, blocks, rhs
        )
        x = solve_symmetric_indefinite(system, self.config.solver_tol)
        b_norm = np.linalg.norm(system.rhs)
        residual = float(np.linalg.norm(system.rhs - system.matrix @ x) / b_norm) if b_norm else 0.0

        y_full[inactive] = system.block(x, "y")
        mu_new = mu_prev.copy()
        mu_new[solved_comps] = system.block(x, "mu")
        return {
            "u": self.velocity_full(system.block(x, "u"), self.lift),
            "p": system.block(x, "p"),
            "phi": self.velocity_full(-system.block(x, "uh"), np.zeros(len(self.lift))),
            "r": system.block(x, "ph"),
            "y": y_full,
            "mu": mu_new,
            "residual": residual,
        }

    def to_solution(self, fields: Dict[str, Any], lower, upper, iterations, kkt, history) -> OptimalitySolution:
        return OptimalitySolution(
            u_h=FeFunction.from_full(self.vel, fields["u"]),
            p_h=FeFunction(self.pres, fields["p"]),
            phi_h=FeFunction.from_full(self.vel, fields["phi"]),
            r_h=FeFunction(self.pres, fields["r"]),
            y_h=FeFunction(self.ctrl, fields["y"]),
            active_lower=lower.copy(),
            active_upper=upper.copy(),
            iterations=iterations,
            kkt_residual=kkt,
            shift=fields["mu"].copy(),
            history=history,
        )


def solve_optimality(spec: ProblemSpec, mesh: Triangulation, config: Optional[MethodConfig] = None) -> OptimalitySolution:
    """
    Primal-dual active-set solution of the discrete optimality system

    Args:
        spec: problem data
        mesh: triangulation
        config: method settings

    Returns:
        OptimalitySolution satisfying the state/adjoint equations, the fixed
        point y = clamp(-(Pi_h phi + mu)/lam) and the discrete variational
        inequality
    """
    config = config or MethodConfig()
    system = OptimalitySystem(spec, mesh, config)
    n_ctrl = system.ctrl.full_dof_count
    lower = np.zeros(n_ctrl, dtype=bool)
    upper = np.zeros(n_ctrl, dtype=bool)
    mu = np.zeros(2)
    history: List[Dict[str, int]] = []
    change = 0

    for iteration in range(1, config.pdas_max_iter + 1):
        fields = system.solve_with_active_sets(lower, upper, mu)
        # boundary control: next sets come from the clamp that meets the integral constraint
        mu = system.balancing_shift(fields["phi"]) if spec.is_neumann else fields["mu"]
        xi = system.candidate(fields["phi"], mu)
        new_lower = xi < system.ya_vec
        new_upper = xi > system.yb_vec
        change = int(np.count_nonzero(new_lower != lower) + np.count_nonzero(new_upper != upper))
        history.append({"lower": int(new_lower.sum()), "upper": int(new_upper.sum()), "change": change})
        logger.info(
            "PDAS iteration %d: %d lower, %d upper active, %d changed",
            iteration, new_lower.sum(), new_upper.sum(), change,
        )
        if change == 0:
            fields["y"] = clamp(fields["y"], system.ya_vec, system.yb_vec)
            fixed_point = float(np.max(np.abs(fields["y"] - clamp(xi, system.ya_vec, system.yb_vec)), initial=0.0))
            balance = float(np.max(np.abs(system.balance_defect(fields["y"]))))
            fields["mu"] = mu
            solution = system.to_solution(fields, lower, upper, iteration, 0.0, history)
            vi = vi_residual(solution.phi_h, solution.y_h, spec, shift=mu)
            kkt = max(fixed_point, balance, max(0.0, -vi), fields["residual"])
            solution.kkt_residual = kkt
            if kkt <= config.pdas_tol:
                logger.info("PDAS converged in %d iterations, KKT residual %.2e", iteration, kkt)
                return solution
            logger.warning("active sets settled but KKT residual %.2e is above tolerance", kkt)
        lower, upper = new_lower, new_upper

    raise IterationFailureError(
        f"Active-set iteration did not converge in {config.pdas_max_iter} iterations.",
        iterations=config.pdas_max_iter,
        last_change=change,
    )


def vi_residual(phi_h: FeFunction, y_h: FeFunction, spec: ProblemSpec, shift=None) -> float:
    """
    Minimum of <Pi_h phi_h + lam y_h + mu, x_h - y_h>_Q over the vertices of
    the discrete admissible box

    Args:
        phi_h: discrete adjoint velocity
        y_h: discrete control
        spec: problem data
        shift: compatibility multiplier mu per component (boundary control)

    Returns:
        Nonpositive number; >= -tol iff the discrete variational inequality holds
    """
    ctrl = y_h.space
    y = y_h.to_full()
    mu = np.zeros(2) if shift is None else np.broadcast_to(np.asarray(shift, dtype=float), (2,))
    multiplier = project_to_control(phi_h, ctrl) + spec.lam * y + np.tile(mu, ctrl.n_nodes)
    lower = ctrl.bound_vector(spec.ya)
    upper = ctrl.bound_vector(spec.yb)
    lower = np.where(np.isfinite(lower), lower, y - 1.0)
    upper = np.where(np.isfinite(upper), upper, y + 1.0)
    per_dof = np.minimum(0.0, np.minimum(multiplier * (lower - y), multiplier * (upper - y)))
    return float(ctrl.weights @ per_dof)


def control_update(phi_h: FeFunction, spec: ProblemSpec) -> FeFunction:
    """
    y_h = clamp(-Pi_h(E_h phi_h) / lam), onto the admissible set with the
    integral constraint for boundary control

    Args:
        phi_h: discrete adjoint velocity
        spec: problem data

    Returns:
        Control on the P0 cell or boundary-edge space
    """
    ctrl = build_space(phi_h.space.mesh, phi_h.space.topology, _control_space_kind(spec))
    target = -project_to_control(phi_h, ctrl) / spec.lam
    if spec.is_neumann:
        return neumann_admissible_project(FeFunction(ctrl, target), spec)
    return FeFunction(ctrl, clamp(target, ctrl.bound_vector(spec.ya), ctrl.bound_vector(spec.yb)))


def _constraint_sum(v, w, lo, hi, c) -> float:
    return float(w @ np.clip(v + c, lo, hi))


def balancing_shift(v: np.ndarray, w: np.ndarray, lo: float, hi: float, target: float) -> float:
    """
    Scalar c with sum_i w_i clamp(v_i + c, lo, hi) = target

    The left side is continuous and nondecreasing in c; bracketing plus
    bisection finds c and the free entries then fix it exactly.

    Raises:
        InvalidArgumentError: target outside [lo * sum(w), hi * sum(w)]
    """
    gamma = w.sum()
    if not lo * gamma <= target <= hi * gamma:
        raise InvalidArgumentError(
            f"Constraint value {target:.6g} is unreachable within [{lo}, {hi}] "
            f"on a boundary of length {gamma:.6g}."
        )
    if np.all((v >= lo) & (v <= hi)) and abs(w @ v - target) <= 1e-14 * max(1.0, abs(target)):
        return 0.0
    c0 = (target - w @ v) / gamma
    c_lo, c_hi = c0, c0
    step = 1.0 + abs(c0)
    while _constraint_sum(v, w, lo, hi, c_lo) > target:
        c_lo -= step
        step *= 2.0
    step = 1.0 + abs(c0)
    while _constraint_sum(v, w, lo, hi, c_hi) < target:
        c_hi += step
        step *= 2.0
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (c_lo + c_hi)
        if _constraint_sum(v, w, lo, hi, mid) < target:
            c_lo = mid
        else:
            c_hi = mid
        if c_hi - c_lo <= 1e-15 * (1.0 + abs(mid)):
            break
    c = 0.5 * (c_lo + c_hi)
    free = (v + c > lo) & (v + c < hi)
    if free.any():
        clipped = np.clip(v + c, lo, hi)
        c = (target - w[~free] @ clipped[~free] - w[free] @ v[free]) / w[free].sum()
    return float(c)


def neumann_admissible_project(y_h: FeFunction, spec: ProblemSpec, f_integral: Optional[np.ndarray] = None) -> FeFunction:
    """
    Q-nearest control with ya <= y <= yb and int_Gamma y + int_Omega f = 0

    Per component the projection is clamp(y + c) for the scalar shift c
    solving the monotone constraint equation.

    Args:
        y_h: boundary control
        spec: boundary-control problem
        f_integral: per-component integral of f (computed when None)

    Returns:
        Projected control
    """
    if not spec.is_neumann:
        raise InvalidArgumentError("Admissible projection with integral constraint needs a boundary-control problem.")
    ctrl = y_h.space
    if f_integral is None:
        f_integral = force_integral(spec, ctrl.mesh)
    values = y_h.node_values().copy()
    w = ctrl.node_weights
    out = np.empty_like(values)
    for k in range(2):
        lo, hi = spec.ya[k], spec.yb[k]
        try:
            c = balancing_shift(values[:, k], w, lo, hi, -f_integral[k])
        except InvalidArgumentError as e:
            raise InvalidArgumentError(f"Component {k}: {e}") from e
        out[:, k] = np.clip(values[:, k] + c, lo, hi)
        logger.debug("admissible projection: component %d shift %.6g", k, c)
    return FeFunction(ctrl, out.ravel())


def cost(sol: OptimalitySolution, spec: ProblemSpec, order: int = 6) -> float:
    """1/2 ||u_h - u_d||^2 + lam/2 ||y_h||_Q^2 by quadrature"""
    mesh = sol.mesh
    rule = triangle_rule(order)
    points = map_to_cells(mesh.vertices[mesh.triangles], rule)
    diff = cell_values(sol.u_h, rule.points) - spec.u_d(points[..., 0], points[..., 1])
    tracking = integrate_cells(np.sum(diff ** 2, axis=-1), sol.u_h.space.topology.areas, rule).sum()
    y = sol.y_h.to_full()
    return float(0.5 * tracking + 0.5 * spec.lam * sol.y_h.space.weights @ y ** 2)
