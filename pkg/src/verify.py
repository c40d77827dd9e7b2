"""
Verify - Manufactured solutions, error norms, convergence rates and residual oracles
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.config import MethodConfig
from src.errors import InvalidArgumentError
from src.mesh import Triangulation, generate_lshape, generate_unit_square
from src.optctrl import (
    DISTRIBUTED,
    NEUMANN,
    OptimalitySolution,
    ProblemSpec,
    build_spaces,
    solve_optimality,
)
from src.quadrature import edge_rule, integrate_cells, map_to_cells, map_to_edges, triangle_rule
from src.spaces import (
    DG1_VECTOR,
    FeFunction,
    cell_gradients,
    cell_values,
    clamp,
    edge_values,
    interpolate,
)

logger = logging.getLogger(__name__)

PI = np.pi
FD_STEP = 1e-5
MOMENTUM_TOL = 1e-6
NO_SLIP_TOL = 1e-8

ALPHA = 856399 / 1572864
OPENING = 3 * PI / 2

VectorField = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(eq=False)
class ManufacturedCase:
    """
    Closed-form optimal state, adjoint and control with the data derived from them

    grad fields return (..., 2, 2) arrays with [..., i, j] = d u_i / d x_j.
    """

    name: str
    domain: str
    lam: float
    ya: float
    yb: float
    u: VectorField
    grad_u: Callable
    p: Callable
    phi: VectorField
    grad_phi: Callable
    r: Callable
    f: VectorField
    u_d: VectorField
    y: VectorField
    dirichlet: Optional[VectorField] = None
    variant: str = ""

    def problem_spec(self) -> ProblemSpec:
        return ProblemSpec(
            kind=DISTRIBUTED,
            f=self.f,
            u_d=self.u_d,
            lam=self.lam,
            ya=self.ya,
            yb=self.yb,
            dirichlet=self.dirichlet,
            name=self.name,
        )

    def mesh(self, n: int) -> Triangulation:
        return generate_unit_square(n) if self.domain == "square" else generate_lshape(n)


def _stack(a, b) -> np.ndarray:
    return np.stack([a, b], axis=-1)


def _grad_tensor(d00, d01, d10, d11) -> np.ndarray:
    return np.stack([np.stack([d00, d01], axis=-1), np.stack([d10, d11], axis=-1)], axis=-2)


# smooth fields on the unit square, reused as the adjoint pair on the L-shape


def smooth_velocity(x, y):
    return _stack(
        np.sin(PI * x) ** 2 * np.sin(PI * y) * np.cos(PI * y),
        -np.sin(PI * y) ** 2 * np.sin(PI * x) * np.cos(PI * x),
    )


def smooth_velocity_gradient(x, y):
    s2x, s2y = np.sin(2 * PI * x), np.sin(2 * PI * y)
    return _grad_tensor(
        0.5 * PI * s2x * s2y,
        PI * np.sin(PI * x) ** 2 * np.cos(2 * PI * y),
        -PI * np.sin(PI * y) ** 2 * np.cos(2 * PI * x),
        -0.5 * PI * s2x * s2y,
    )


def smooth_velocity_laplacian(x, y):
    s2x, s2y = np.sin(2 * PI * x), np.sin(2 * PI * y)
    return _stack(
        0.5 * s2y * (2 * PI ** 2 * np.cos(2 * PI * x) - 4 * PI ** 2 * np.sin(PI * x) ** 2),
        -0.5 * s2x * (2 * PI ** 2 * np.cos(2 * PI * y) - 4 * PI ** 2 * np.sin(PI * y) ** 2),
    )


def smooth_pressure(x, y):
    return np.sin(2 * PI * x) * np.sin(2 * PI * y)


def smooth_pressure_gradient(x, y):
    return _stack(
        2 * PI * np.cos(2 * PI * x) * np.sin(2 * PI * y),
        2 * PI * np.sin(2 * PI * x) * np.cos(2 * PI * y),
    )


def _control(lam: float, ya: float, yb: float) -> VectorField:
    def control(x, y):
        return clamp(-smooth_velocity(x, y) / lam, ya, yb)

    return control


def _desired_state(u: VectorField) -> VectorField:
    def u_d(x, y):
        return u(x, y) + smooth_velocity_laplacian(x, y) + smooth_pressure_gradient(x, y)

    return u_d


def example1(lam: float = 1.0, ya: float = -0.1, yb: float = 0.25) -> ManufacturedCase:
    """Smooth distributed-control case on the unit square with u = phi and p = r"""
    y = _control(lam, ya, yb)

    def f(x1, x2):
        return -smooth_velocity_laplacian(x1, x2) + smooth_pressure_gradient(x1, x2) - y(x1, x2)

    return ManufacturedCase(
        name="ex1",
        domain="square",
        lam=lam,
        ya=ya,
        yb=yb,
        u=smooth_velocity,
        grad_u=smooth_velocity_gradient,
        p=smooth_pressure,
        phi=smooth_velocity,
        grad_phi=smooth_velocity_gradient,
        r=smooth_pressure,
        f=f,
        u_d=_desired_state(smooth_velocity),
        y=y,
    )


# singular corner solution on the L-shape


class AngularFunction:
    """Sum of amp_sin sin(k theta) + amp_cos cos(k theta) terms with exact derivatives"""

    def __init__(self, name: str, terms: Sequence[tuple]):
        self.name = name
        self.terms = list(terms)

    def __call__(self, theta: np.ndarray, derivative: int = 0) -> np.ndarray:
        out = np.zeros_like(np.asarray(theta, dtype=float))
        for amp_sin, amp_cos, k in self.terms:
            # d^n/dt^n [A sin + B cos] cycles through (A, B) -> (-B, A) scaled by k
            a, b = amp_sin, amp_cos
            for _ in range(derivative):
                a, b = -b * k, a * k
            out = out + a * np.sin(k * theta) + b * np.cos(k * theta)
        return out


def angular_candidates(alpha: float = ALPHA, opening: float = OPENING) -> List[AngularFunction]:
    """The printed parenthesization first, then the standard re-entrant corner form"""
    c = np.cos(alpha * opening)
    as_printed = AngularFunction(
        "as-printed",
        [(c / (1 + alpha), -1.0, alpha + 1), (c / (1 + alpha), -1.0, alpha - 1)],
    )
    standard = AngularFunction(
        "standard",
        [(c / (1 + alpha), -1.0, 1 + alpha), (-c / (1 - alpha), 1.0, 1 - alpha)],
    )
    return [as_printed, standard]


def polar(x, y):
    """Radius and angle in (-pi/2, 3pi/2], continuous across the positive x axis"""
    r = np.hypot(x, y)
    theta = np.arctan2(y, x)
    theta = np.where(theta <= -PI / 2, theta + 2 * PI, theta)
    return r, theta


def _corner_fields(omega: AngularFunction, alpha: float):
    a = 1 + alpha

    def u(x, y):
        r, t = polar(x, y)
        w0, w1 = omega(t), omega(t, 1)
        ra = r ** alpha
        return _stack(
            ra * (a * np.sin(t) * w0 + np.cos(t) * w1),
            ra * (-a * np.cos(t) * w0 + np.sin(t) * w1),
        )

    def grad_u(x, y):
        r, t = polar(x, y)
        w0, w1, w2 = omega(t), omega(t, 1), omega(t, 2)
        s, c = np.sin(t), np.cos(t)
        g1 = a * s * w0 + c * w1
        g2 = -a * c * w0 + s * w1
        dg1 = a * c * w0 + (a - 1) * s * w1 + c * w2
        dg2 = a * s * w0 - (a - 1) * c * w1 + s * w2
        with np.errstate(divide="ignore", invalid="ignore"):
            rb = r ** (alpha - 1)
        return _grad_tensor(
            rb * (alpha * c * g1 - s * dg1),
            rb * (alpha * s * g1 + c * dg1),
            rb * (alpha * c * g2 - s * dg2),
            rb * (alpha * s * g2 + c * dg2),
        )

    def p(x, y):
        r, t = polar(x, y)
        if np.any(r == 0.0):
            raise InvalidArgumentError("The corner pressure is unbounded at the origin.")
        return -(r ** (alpha - 1)) * (a ** 2 * omega(t, 1) + omega(t, 3)) / (1 - alpha)

    return u, grad_u, p


def fd_momentum_residual(u_grad: Callable, p: Callable, x: np.ndarray, y: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """
    Central-difference -div(grad u) + grad p at the given points

    Returns:
        (n, 2) residual vectors
    """
    lap = (
        (u_grad(x + h, y)[..., :, 0] - u_grad(x - h, y)[..., :, 0])
        + (u_grad(x, y + h)[..., :, 1] - u_grad(x, y - h)[..., :, 1])
    ) / (2 * h)
    grad_p = _stack((p(x + h, y) - p(x - h, y)) / (2 * h), (p(x, y + h) - p(x, y - h)) / (2 * h))
    return -lap + grad_p


def fd_gradient(u: VectorField, x: np.ndarray, y: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference (..., 2, 2) gradient of a vector field"""
    dx = (u(x + h, y) - u(x - h, y)) / (2 * h)
    dy = (u(x, y + h) - u(x, y - h)) / (2 * h)
    return np.stack([dx, dy], axis=-1)


def sample_lshape(count: int, rng: np.random.Generator, min_radius: float = 0.1, margin: float = 1e-3):
    """Random points of the L-shape away from the corner and the boundary"""
    xs: List[np.ndarray] = []
    ys: List[np.ndarray] = []
    while sum(len(v) for v in xs) < count:
        x = rng.uniform(-1 + margin, 1 - margin, count)
        y = rng.uniform(-1 + margin, 1 - margin, count)
        keep = (np.hypot(x, y) > min_radius) & ~((x > -margin) & (y < margin))
        xs.append(x[keep])
        ys.append(y[keep])
    return np.concatenate(xs)[:count], np.concatenate(ys)[:count]


def select_angular_function(alpha: float = ALPHA, rng: Optional[np.random.Generator] = None) -> AngularFunction:
    """
    First candidate whose velocity/pressure pair is Stokes-homogeneous and
    vanishes on the theta = 0 edge

    Raises:
        InvalidArgumentError: when no candidate passes
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x, y = sample_lshape(100, rng)
    edge_x = np.linspace(0.05, 1.0, 20)
    for omega in angular_candidates(alpha):
        u, grad_u, p = _corner_fields(omega, alpha)
        momentum = float(np.max(np.abs(fd_momentum_residual(grad_u, p, x, y))))
        slip = float(np.max(np.abs(u(edge_x, np.zeros_like(edge_x)))))
        logger.debug("angular function %s: momentum %.2e, wall velocity %.2e", omega.name, momentum, slip)
        if momentum <= MOMENTUM_TOL and slip <= NO_SLIP_TOL:
            logger.info("corner solution uses the %s angular function", omega.name)
            return omega
    raise InvalidArgumentError("No angular function passes the momentum and no-slip checks.")


def example2(lam: float = 1.0, ya: float = -0.1, yb: float = 0.25) -> ManufacturedCase:
    """Singular corner velocity/pressure on the L-shape with the smooth adjoint pair"""
    omega = select_angular_function(ALPHA)
    u, grad_u, p = _corner_fields(omega, ALPHA)
    y = _control(lam, ya, yb)

    def f(x1, x2):
        # the corner pair solves the homogeneous Stokes system
        return -y(x1, x2)

    logger.info("L-shape quadrature near the corner is inexact for the singular fields")
    return ManufacturedCase(
        name="ex2",
        domain="lshape",
        lam=lam,
        ya=ya,
        yb=yb,
        u=u,
        grad_u=grad_u,
        p=p,
        phi=smooth_velocity,
        grad_phi=smooth_velocity_gradient,
        r=smooth_pressure,
        f=f,
        u_d=_desired_state(u),
        y=y,
        dirichlet=u,
        variant=omega.name,
    )


def neumann_demo(lam: float = 0.1, ya: float = -0.1, yb: float = 0.25) -> ProblemSpec:
    """
    Smooth boundary-control case on the unit square

    -(1/|Gamma|) int f = (0.05 - 1/pi^2, -0.05), inside the default bounds.
    """

    def f(x, y):
        return _stack(
            -0.2 + np.sin(PI * x) * np.sin(PI * y),
            0.2 + np.cos(PI * x) * np.cos(PI * y),
        )

    def u_d(x, y):
        return _stack(np.sin(PI * x) * np.cos(PI * y), -np.cos(PI * x) * np.sin(PI * y))

    return ProblemSpec(kind=NEUMANN, f=f, u_d=u_d, lam=lam, ya=ya, yb=yb, domain="square", name="neumann")


CASES = {"ex1": example1, "ex2": example2}


@dataclass
class ErrorRecord:
    """Discretization errors of one solve"""

    err_u_energy: float
    err_p_l2: float
    err_phi_energy: float
    err_r_l2: float
    err_y: float
    err_u_l2: float = 0.0
    err_phi_l2: float = 0.0

    @property
    def total(self) -> float:
        return self.err_u_energy + self.err_p_l2 + self.err_phi_energy + self.err_r_l2 + self.err_y

    def as_dict(self) -> Dict[str, float]:
        return {
            "err_u_energy": self.err_u_energy,
            "err_p_l2": self.err_p_l2,
            "err_phi_energy": self.err_phi_energy,
            "err_r_l2": self.err_r_l2,
            "err_y": self.err_y,
            "err_u_l2": self.err_u_l2,
            "err_phi_l2": self.err_phi_l2,
        }


def _velocity_errors(v_h: FeFunction, v: VectorField, grad_v: Callable, rule, points, areas):
    """(energy, L2) errors; DG adds the jumps of v - v_h"""
    diff = v(points[..., 0], points[..., 1]) - cell_values(v_h, rule.points)
    l2 = integrate_cells(np.sum(diff ** 2, axis=-1), areas, rule).sum()
    grad_diff = grad_v(points[..., 0], points[..., 1]) - cell_gradients(v_h)[:, None]
    energy = integrate_cells(np.sum(grad_diff ** 2, axis=(-2, -1)), areas, rule).sum()
    space = v_h.space
    if space.kind == DG1_VECTOR:
        topo = space.topology
        erule = edge_rule(rule.order)
        s = erule.points
        ids = topo.interior_edge_ids
        jump = edge_values(v_h, ids, 0, s) - edge_values(v_h, ids, 1, s)
        energy += np.einsum("q,eq->", erule.weights, np.sum(jump ** 2, axis=-1))
        bd = topo.boundary_edge_ids
        x = space.mesh.vertices
        pts = map_to_edges(x[topo.edges[bd, 0]], x[topo.edges[bd, 1]], erule)
        trace = v(pts[..., 0], pts[..., 1]) - edge_values(v_h, bd, 0, s)
        energy += np.einsum("q,eq->", erule.weights, np.sum(trace ** 2, axis=-1))
    return float(np.sqrt(energy)), float(np.sqrt(l2))


def _pressure_error(q_h: FeFunction, q: Callable, rule, points, areas) -> float:
    exact = q(points[..., 0], points[..., 1])
    mean = integrate_cells(exact, areas, rule).sum() / areas.sum()
    diff = exact - mean - q_h.to_full()[:, None]
    return float(np.sqrt(integrate_cells(diff ** 2, areas, rule).sum()))


def error_norms(
    sol: OptimalitySolution, case: ManufacturedCase, mesh: Triangulation, config: Optional[MethodConfig] = None
) -> ErrorRecord:
    """
    Broken energy errors of u and phi, L2 errors of p and r, Q error of y

    Args:
        sol: discrete solution on mesh
        case: exact solution
        mesh: triangulation
        config: supplies the quadrature order

    Returns:
        ErrorRecord
    """
    if mesh is not sol.mesh:
        raise InvalidArgumentError("Solution was computed on a different mesh.")
    config = config or MethodConfig()
    rule = triangle_rule(config.error_order)
    points = map_to_cells(mesh.vertices[mesh.triangles], rule)
    areas = sol.u_h.space.topology.areas

    u_energy, u_l2 = _velocity_errors(sol.u_h, case.u, case.grad_u, rule, points, areas)
    phi_energy, phi_l2 = _velocity_errors(sol.phi_h, case.phi, case.grad_phi, rule, points, areas)
    y_diff = case.y(points[..., 0], points[..., 1]) - sol.y_h.node_values()[:, None, :]
    err_y = float(np.sqrt(integrate_cells(np.sum(y_diff ** 2, axis=-1), areas, rule).sum()))
    record = ErrorRecord(
        err_u_energy=u_energy,
        err_p_l2=_pressure_error(sol.p_h, case.p, rule, points, areas),
        err_phi_energy=phi_energy,
        err_r_l2=_pressure_error(sol.r_h, case.r, rule, points, areas),
        err_y=err_y,
        err_u_l2=u_l2,
        err_phi_l2=phi_l2,
    )
    logger.debug("errors: %s", record.as_dict())
    return record


def interpolant_solution(case: ManufacturedCase, mesh: Triangulation, config: Optional[MethodConfig] = None) -> OptimalitySolution:
    """Canonical interpolants of the exact fields packed as a solution"""
    config = config or MethodConfig()
    spec = case.problem_spec()
    vel, pres, ctrl = build_spaces(spec, mesh, config.method)
    order = config.load_order

    def centered(q):
        values = interpolate(q, pres, order).to_full()
        return FeFunction(pres, values - pres.node_weights @ values / pres.node_weights.sum())

    empty = np.zeros(ctrl.full_dof_count, dtype=bool)
    return OptimalitySolution(
        u_h=interpolate(case.u, vel, order),
        p_h=centered(case.p),
        phi_h=interpolate(case.phi, vel, order),
        r_h=centered(case.r),
        y_h=interpolate(case.y, ctrl, order),
        active_lower=empty,
        active_upper=empty.copy(),
        iterations=0,
        kkt_residual=0.0,
    )


def run_level(case: ManufacturedCase, n: int, config: MethodConfig):
    """Solve the case on the level-n mesh; returns (mesh, solution, errors)"""
    mesh = case.mesh(n)
    sol = solve_optimality(case.problem_spec(), mesh, config)
    return mesh, sol, error_norms(sol, case, mesh, config)


def eoc_values(errors: Sequence[float], sizes: Sequence[float], wrt: str = "h") -> np.ndarray:
    """
    Experimental orders of convergence between consecutive levels

    Args:
        errors: positive error values
        sizes: mesh sizes h (wrt="h") or Ndof (wrt="Ndof")
        wrt: "h" or "Ndof"

    Returns:
        rates, one fewer than levels
    """
    e = np.asarray(errors, dtype=float)
    s = np.asarray(sizes, dtype=float)
    if len(e) < 2 or len(e) != len(s):
        raise InvalidArgumentError("Rates need at least two levels of matching errors and sizes.")
    if np.any(e <= 0) or np.any(s <= 0):
        raise InvalidArgumentError("Rates need positive errors and sizes.")
    rates = np.log(e[:-1] / e[1:]) / np.log(s[:-1] / s[1:])
    if wrt == "Ndof":
        return -rates
    if wrt != "h":
        raise InvalidArgumentError(f"Unknown rate base {wrt!r}; expected 'h' or 'Ndof'.")
    return rates


def eoc(history, key: str, wrt: str = "h") -> np.ndarray:
    """
    Rates of one column of a convergence history

    Args:
        history: ConvergenceHistory or a DataFrame with the history columns
        key: error or estimator column
        wrt: "h" or "Ndof"
    """
    frame = history if isinstance(history, pd.DataFrame) else history.to_frame()
    if key not in frame.columns:
        raise InvalidArgumentError(f"History has no column {key!r}.")
    return eoc_values(frame[key].to_numpy(), frame[wrt].to_numpy(), wrt)


TABLE_COLUMNS = [
    ("err_u_h", "err_u_energy"),
    ("err_p", "err_p_l2"),
    ("err_phi_h", "err_phi_energy"),
    ("err_r", "err_r_l2"),
    ("err_y", "err_y"),
]


def error_table(hs: Sequence[float], records: Sequence[ErrorRecord]) -> pd.DataFrame:
    """h, err_u_h, rate, err_p, rate, err_phi_h, rate, err_r, rate, err_y, rate"""
    data = [list(hs)]
    names = ["h"]
    for label, attr in TABLE_COLUMNS:
        values = [getattr(rec, attr) for rec in records]
        rates: List[Union[float, None]] = [None]
        if len(values) > 1:
            rates += list(eoc_values(values, hs))
        data += [values, rates]
        names += [label, "rate"]
    return pd.DataFrame(list(zip(*data)), columns=names)


@dataclass
class ReliabilityMonitor:
    """Tracks total error / (eta + consistency) across levels"""

    ratios: List[float] = field(default_factory=list)

    def add(self, total_error: float, eta: float, consistency: float) -> float:
        ratio = total_error / (eta + consistency)
        self.ratios.append(ratio)
        logger.info("reliability ratio %.4g", ratio)
        return ratio

    @property
    def stable(self) -> bool:
        return bool(self.ratios) and max(self.ratios) <= 2.0 * self.ratios[0]
