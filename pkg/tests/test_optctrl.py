import itertools

import numpy as np
import pytest

from src.assembly import assemble_mean_rows
from src.config import MethodConfig
from src.errors import InvalidArgumentError, IterationFailureError
from src.mesh import generate_unit_square
from src.optctrl import (
    DISTRIBUTED,
    NEUMANN,
    OptimalitySystem,
    ProblemSpec,
    balancing_shift,
    build_spaces,
    control_update,
    cost,
    force_integral,
    neumann_admissible_project,
    project_to_control,
    solve_optimality,
    vi_residual,
)
from src.quadrature import integrate_cells, map_to_cells, triangle_rule
from src.spaces import P0_BOUNDARY_VECTOR, FeFunction, build_space, interpolate
from src.verify import example1, neumann_demo


def constant(cx, cy):
    def field(x, y):
        return np.stack([np.full_like(x, cx), np.full_like(x, cy)], axis=-1)

    return field


def _brute_force_minimizer(system):
    """Fit the reduced quadratic and enumerate every active-set pattern"""
    n = system.ctrl.full_dof_count
    basis = np.eye(n)
    c = system.reduced_cost(np.zeros(n))
    q1 = np.array([system.reduced_cost(basis[i]) for i in range(n)])
    q2 = np.array([system.reduced_cost(2.0 * basis[i]) for i in range(n)])
    H = np.diag(q2 - 2.0 * q1 + c)
    for i, j in itertools.combinations(range(n), 2):
        H[i, j] = H[j, i] = system.reduced_cost(basis[i] + basis[j]) - q1[i] - q1[j] + c
    g = q1 - c - 0.5 * np.diag(H)

    lo, hi = system.ya_vec, system.yb_vec
    best, best_value = None, np.inf
    for pattern in itertools.product((0, 1, 2), repeat=n):
        pattern = np.array(pattern)
        y = np.where(pattern == 1, lo, np.where(pattern == 2, hi, 0.0))
        free = pattern == 0
        if free.any():
            rhs = -g[free] - H[np.ix_(free, ~free)] @ y[~free]
            y[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        if np.any(y < lo - 1e-12) or np.any(y > hi + 1e-12):
            continue
        value = 0.5 * y @ H @ y + g @ y
        if value < best_value:
            best, best_value = y, value
    return best


def test_problem_spec_validation():
    f = constant(0.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        ProblemSpec(kind=DISTRIBUTED, f=f, u_d=f, lam=0.0)
    with pytest.raises(InvalidArgumentError):
        ProblemSpec(kind=DISTRIBUTED, f=f, u_d=f, ya=0.3, yb=0.25)
    with pytest.raises(InvalidArgumentError):
        ProblemSpec(kind="robin", f=f, u_d=f)
    with pytest.raises(InvalidArgumentError):
        ProblemSpec(kind=NEUMANN, f=f, u_d=f, dirichlet=f)
    spec = ProblemSpec(kind=DISTRIBUTED, f=f, u_d=f, ya=[-1.0, -2.0], yb=1.0)
    np.testing.assert_array_equal(spec.ya, [-1.0, -2.0])
    np.testing.assert_array_equal(spec.yb, [1.0, 1.0])


def test_neumann_compatibility_checked():
    # -int f / |Gamma| = -1/4 per component, below ya = -0.1
    with pytest.raises(InvalidArgumentError):
        ProblemSpec(kind=NEUMANN, f=constant(1.0, 1.0), u_d=constant(0.0, 0.0), ya=-0.1, yb=0.25, domain="square")


def test_matches_brute_force_on_two_triangles(forced_spec):
    mesh = generate_unit_square(1)
    config = MethodConfig(method="cr")
    system = OptimalitySystem(forced_spec, mesh, config)
    expected = _brute_force_minimizer(system)
    sol = solve_optimality(forced_spec, mesh, config)
    np.testing.assert_allclose(sol.y_h.to_full(), expected, atol=1e-8)
    assert system.reduced_cost(sol.y_h.to_full()) == pytest.approx(system.reduced_cost(expected), abs=1e-10)

    u, p = system.solve_state(expected)
    phi, r = system.solve_adjoint(u)
    np.testing.assert_allclose(sol.u_h.to_full(), u, atol=1e-8)
    np.testing.assert_allclose(sol.p_h.coeffs, p, atol=1e-8)
    np.testing.assert_allclose(sol.phi_h.to_full(), phi, atol=1e-8)
    np.testing.assert_allclose(sol.r_h.coeffs, r, atol=1e-8)


def test_unconstrained_problem_converges_in_one_step(cr_config):
    case = example1()
    spec = ProblemSpec(kind=DISTRIBUTED, f=case.f, u_d=case.u_d, lam=1.0)
    sol = solve_optimality(spec, generate_unit_square(4), cr_config)
    assert sol.iterations == 1
    assert not sol.active_lower.any() and not sol.active_upper.any()
    expected = -project_to_control(sol.phi_h, sol.y_h.space) / spec.lam
    np.testing.assert_allclose(sol.y_h.to_full(), expected, atol=1e-12)


def test_optimality_certificates(method_config):
    case = example1()
    spec = case.problem_spec()
    mesh = generate_unit_square(4)
    sol = solve_optimality(spec, mesh, method_config)
    y = sol.y_h.to_full()
    lower = sol.y_h.space.bound_vector(spec.ya)
    upper = sol.y_h.space.bound_vector(spec.yb)
    assert np.all(y >= lower) and np.all(y <= upper)
    assert sol.active_lower.any() and sol.active_upper.any()
    np.testing.assert_allclose(control_update(sol.phi_h, spec).to_full(), y, atol=1e-9)
    assert vi_residual(sol.phi_h, sol.y_h, spec) >= -1e-9
    assert sol.kkt_residual <= method_config.pdas_tol
    assert sol.history[-1]["change"] == 0
    assert len(sol.history) == sol.iterations


def test_discrete_divergence_free(square4, cr_config):
    spec = example1().problem_spec()
    sol = solve_optimality(spec, square4, cr_config)
    system = OptimalitySystem(spec, square4, cr_config)
    u_f = sol.u_h.to_full()[system.vel.free_dofs]
    np.testing.assert_allclose(system.B_f @ u_f, system.state_rhs_p, atol=1e-10)
    phi_f = sol.phi_h.to_full()[system.vel.free_dofs]
    np.testing.assert_allclose(system.B_f @ phi_f, 0.0, atol=1e-10)


def test_optimal_cost_is_minimal(square2, cr_config, rng):
    spec = example1().problem_spec()
    sol = solve_optimality(spec, square2, cr_config)
    system = OptimalitySystem(spec, square2, cr_config)
    y = sol.y_h.to_full()
    optimal = system.reduced_cost(y)
    for _ in range(100):
        trial = np.clip(y + 0.05 * rng.standard_normal(len(y)), system.ya_vec, system.yb_vec)
        assert system.reduced_cost(trial) >= optimal - 1e-12


def test_solve_is_deterministic(square2, dg_config):
    spec = example1().problem_spec()
    first = solve_optimality(spec, square2, dg_config)
    second = solve_optimality(spec, square2, dg_config)
    np.testing.assert_array_equal(first.y_h.to_full(), second.y_h.to_full())
    assert first.history == second.history


def test_iteration_cap_raises(square4):
    spec = example1().problem_spec()
    with pytest.raises(IterationFailureError) as info:
        solve_optimality(spec, square4, MethodConfig(method="cr", pdas_max_iter=1))
    assert info.value.iterations == 1


def test_cost_matches_reduced_cost(square2, cr_config):
    case = example1()
    spec = case.problem_spec()
    sol = solve_optimality(spec, square2, cr_config)
    system = OptimalitySystem(spec, square2, cr_config)
    rule = triangle_rule(cr_config.load_order)
    points = map_to_cells(square2.vertices[square2.triangles], rule)
    ud = spec.u_d(points[..., 0], points[..., 1])
    constant_part = 0.5 * integrate_cells(np.sum(ud ** 2, axis=-1), square2.signed_areas, rule).sum()
    reduced = system.reduced_cost(sol.y_h.to_full())
    assert cost(sol, spec) == pytest.approx(reduced + constant_part, rel=1e-10)


def test_vi_residual_detects_wrong_sign(square2):
    spec = example1().problem_spec()
    vel, _, ctrl = build_spaces(spec, square2, "cr")
    phi = FeFunction.zeros(vel)
    at_lower = FeFunction(ctrl, ctrl.bound_vector(spec.ya))
    assert vi_residual(phi, at_lower, spec) < 0
    assert vi_residual(phi, FeFunction.zeros(ctrl), spec) == pytest.approx(0.0)


def test_control_update_clamps(square2):
    spec = example1().problem_spec()
    vel, _, _ = build_spaces(spec, square2, "dg")
    phi = interpolate(constant(0.5, -1.0), vel)
    y = control_update(phi, spec).node_values()
    np.testing.assert_allclose(y[:, 0], -0.1)
    np.testing.assert_allclose(y[:, 1], 0.25)

    free = ProblemSpec(kind=DISTRIBUTED, f=spec.f, u_d=spec.u_d, lam=2.0)
    np.testing.assert_allclose(control_update(phi, free).node_values(), np.tile([-0.25, 0.5], (8, 1)))


def test_neumann_solution_satisfies_compatibility(method_config):
    spec = neumann_demo()
    mesh = generate_unit_square(4)
    sol = solve_optimality(spec, mesh, method_config)
    ctrl = sol.y_h.space
    balance = ctrl.node_weights @ sol.y_h.node_values() + force_integral(spec, mesh)
    np.testing.assert_allclose(balance, 0.0, atol=1e-10)
    y = sol.y_h.to_full()
    assert np.all(y >= ctrl.bound_vector(spec.ya) - 1e-12)
    assert np.all(y <= ctrl.bound_vector(spec.yb) + 1e-12)
    assert vi_residual(sol.phi_h, sol.y_h, spec, shift=sol.shift) >= -1e-9
    means = assemble_mean_rows(sol.u_h.space) @ sol.u_h.to_full()
    np.testing.assert_allclose(means, 0.0, atol=1e-10)


def test_admissible_projection(square4):
    spec = neumann_demo()
    ctrl = build_space(square4, None, P0_BOUNDARY_VECTOR)
    f_int = force_integral(spec, square4)
    raw = FeFunction(ctrl, np.linspace(-1.0, 1.0, ctrl.dof_count))
    projected = neumann_admissible_project(raw, spec, f_int)
    values = projected.node_values()
    np.testing.assert_allclose(ctrl.node_weights @ values + f_int, 0.0, atol=1e-12)
    assert np.all(values >= -0.1 - 1e-15) and np.all(values <= 0.25 + 1e-15)
    # projecting again changes nothing
    again = neumann_admissible_project(projected, spec, f_int)
    np.testing.assert_allclose(again.to_full(), projected.to_full(), atol=1e-14)


def test_admissible_projection_is_a_shift_without_bounds(square4):
    spec = ProblemSpec(kind=NEUMANN, f=constant(1.0, -2.0), u_d=constant(0.0, 0.0))
    ctrl = build_space(square4, None, P0_BOUNDARY_VECTOR)
    raw = FeFunction(ctrl, np.linspace(0.0, 1.0, ctrl.dof_count))
    projected = neumann_admissible_project(raw, spec, np.array([1.0, -2.0]))
    shift = projected.node_values() - raw.node_values()
    np.testing.assert_allclose(shift, np.broadcast_to(shift[0], shift.shape), atol=1e-12)
    np.testing.assert_allclose(ctrl.node_weights @ projected.node_values(), [-1.0, 2.0], atol=1e-12)


def test_admissible_projection_rejects_distributed(square2):
    spec = example1().problem_spec()
    ctrl = build_space(square2, None, P0_BOUNDARY_VECTOR)
    with pytest.raises(InvalidArgumentError):
        neumann_admissible_project(FeFunction.zeros(ctrl), spec)


@pytest.mark.parametrize("n", [2, 4])
def test_neumann_balance_survives_active_bounds(n, cr_config):
    spec = neumann_demo(lam=0.1)
    mesh = generate_unit_square(n)
    sol = solve_optimality(spec, mesh, cr_config)
    system = OptimalitySystem(spec, mesh, cr_config)
    np.testing.assert_allclose(system.balance_defect(sol.y_h.to_full()), 0.0, atol=1e-10)
    assert sol.kkt_residual <= cr_config.pdas_tol
    active = (sol.active_lower | sol.active_upper).reshape(-1, 2)
    assert active.any()
    # a fully clamped component could only balance by coincidence
    assert not active.all(axis=0).any()
    assert vi_residual(sol.phi_h, sol.y_h, spec, shift=sol.shift) >= -1e-9


def test_neumann_rejects_unbalanceable_load(square2, cr_config):
    spec = ProblemSpec(kind=NEUMANN, f=constant(1.0, 1.0), u_d=constant(0.0, 0.0), ya=-0.1, yb=0.25)
    with pytest.raises(InvalidArgumentError):
        solve_optimality(spec, square2, cr_config)


def test_balancing_shift_meets_target():
    v = np.array([-0.5, 0.0, 0.1, 0.9])
    w = np.array([0.25, 0.5, 0.25, 1.0])
    c = balancing_shift(v, w, -0.1, 0.25, 0.1)
    assert w @ np.clip(v + c, -0.1, 0.25) == pytest.approx(0.1, abs=1e-14)
    assert balancing_shift(np.full(4, 0.05), w, -0.1, 0.25, 0.1) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(InvalidArgumentError):
        balancing_shift(v, w, -0.1, 0.25, 0.6)


def test_admissible_projection_matches_shift_scan(square4):
    spec = neumann_demo()
    ctrl = build_space(square4, None, P0_BOUNDARY_VECTOR)
    f_int = force_integral(spec, square4)
    raw = np.sin(7.0 * np.arange(ctrl.dof_count)).reshape(-1, 2)
    projected = neumann_admissible_project(FeFunction(ctrl, raw.ravel()), spec, f_int).node_values()
    w = ctrl.node_weights
    shifts = np.linspace(-2.0, 2.0, 40001)
    for k in range(2):
        totals = np.clip(raw[:, k][None, :] + shifts[:, None], spec.ya[k], spec.yb[k]) @ w
        best = shifts[np.argmin(np.abs(totals + f_int[k]))]
        scanned = np.clip(raw[:, k] + best, spec.ya[k], spec.yb[k])
        np.testing.assert_allclose(projected[:, k], scanned, atol=2e-4)


def test_solve_adjoint_reproduces_coupled_solution(square2, method_config):
    spec = example1().problem_spec()
    sol = solve_optimality(spec, square2, method_config)
    system = OptimalitySystem(spec, square2, method_config)
    phi, r = system.solve_adjoint(sol.u_h.to_full())
    np.testing.assert_allclose(phi, sol.phi_h.to_full(), atol=1e-10)
    np.testing.assert_allclose(r, sol.r_h.coeffs, atol=1e-10)


def test_reduced_gradient_matches_adjoint(square2, method_config, rng):
    spec = example1().problem_spec()
    system = OptimalitySystem(spec, square2, method_config)
    y = rng.uniform(-0.1, 0.25, system.ctrl.full_dof_count)
    d = rng.standard_normal(len(y))
    u, _ = system.solve_state(y)
    phi, _ = system.solve_adjoint(u)
    gradient = spec.lam * (system.Q @ y) + system.coupling.T @ phi
    t = 1e-3
    slope = (system.reduced_cost(y + t * d) - system.reduced_cost(y - t * d)) / (2.0 * t)
    assert slope == pytest.approx(gradient @ d, rel=1e-7, abs=1e-10)
