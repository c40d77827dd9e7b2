import numpy as np
import pytest
import scipy.sparse as sp

from src.assembly import (
    assemble_control_coupling,
    assemble_control_mass,
    assemble_diffusion_cr,
    assemble_diffusion_dg,
    assemble_divergence_cr,
    assemble_divergence_dg,
    assemble_divergence_dg_dual,
    assemble_jump_gram,
    assemble_load,
    assemble_mean_rows,
    assemble_velocity_mass,
    coercivity_probe,
    inf_sup_probe,
    local_mass,
    poincare_probe,
    write_coo,
)
from src.errors import InvalidArgumentError
from src.mesh import EDGE_END, EDGE_START, generate_unit_square
from src.optctrl import build_spaces
from src.spaces import (
    CR_VECTOR,
    DG1_VECTOR,
    DIRICHLET,
    P0_BOUNDARY_VECTOR,
    P0_SCALAR,
    P0_VECTOR,
    build_space,
    interpolate,
)
from src.verify import example1, neumann_demo


def linear_field(x, y):
    return np.stack([x - 2.0 * y, 0.5 + x + y], axis=-1)


def test_cr_stiffness_symmetric_with_constant_kernel(square4, topo4):
    space = build_space(square4, topo4, CR_VECTOR)
    a = assemble_diffusion_cr(space)
    assert abs(a - a.T).max() < 1e-12
    np.testing.assert_allclose(a @ np.ones(space.full_dof_count), 0.0, atol=1e-12)


def test_cr_local_mass_is_diagonal(square4, topo4):
    space = build_space(square4, topo4, CR_VECTOR)
    expected = topo4.areas[:, None, None] / 3.0 * np.eye(3)[None]
    np.testing.assert_allclose(local_mass(space), expected, atol=1e-15)
    m = assemble_velocity_mass(space)
    assert m.sum() == pytest.approx(2.0)


def test_cr_divergence_matches_boundary_flux(square2):
    vel = build_space(square2, None, CR_VECTOR)
    pres = build_space(square2, vel.topology, P0_SCALAR)
    b = assemble_divergence_cr(vel, pres).toarray()
    x = square2.vertices
    eot = vel.topology.edge_of_triangle
    for T, tri in enumerate(square2.triangles):
        for i in range(3):
            t = x[tri[EDGE_END[i]]] - x[tri[EDGE_START[i]]]
            outward = np.array([t[1], -t[0]])
            for c in range(2):
                assert b[T, 2 * eot[T, i] + c] == pytest.approx(-outward[c])


@pytest.mark.parametrize("neumann", [False, True])
def test_dg_divergence_forms_agree(square4, topo4, neumann):
    vel = build_space(square4, topo4, DG1_VECTOR)
    pres = build_space(square4, topo4, P0_SCALAR)
    primal = assemble_divergence_dg(vel, pres, neumann=neumann)
    dual = assemble_divergence_dg_dual(vel, pres, neumann=neumann)
    assert abs(primal - dual).max() < 1e-12


def test_dg_diffusion_symmetric(square4, topo4):
    space = build_space(square4, topo4, DG1_VECTOR)
    a = assemble_diffusion_dg(space, sigma=10.0)
    assert abs(a - a.T).max() < 1e-12
    with pytest.raises(InvalidArgumentError):
        assemble_diffusion_dg(space, sigma=0.0)


def test_jump_gram_vanishes_on_continuous_fields(square4, topo4):
    space = build_space(square4, topo4, DG1_VECTOR)
    v = interpolate(linear_field, space).to_full()
    interior = assemble_jump_gram(space, neumann=True)
    assert v @ (interior @ v) == pytest.approx(0.0, abs=1e-12)
    assert v @ (assemble_jump_gram(space) @ v) > 0


@pytest.mark.parametrize("kind", [CR_VECTOR, DG1_VECTOR])
def test_control_coupling_on_constants(square4, topo4, kind):
    vel = build_space(square4, topo4, kind)
    ones = np.ones(vel.full_dof_count)

    ctrl = build_space(square4, topo4, P0_VECTOR)
    coupling = assemble_control_coupling(vel, ctrl)
    np.testing.assert_allclose(coupling.T @ ones, ctrl.weights)

    bd = build_space(square4, topo4, P0_BOUNDARY_VECTOR)
    np.testing.assert_allclose(assemble_control_coupling(vel, bd).T @ ones, bd.weights)


def test_load_and_mean_rows_integrate(square4, topo4):
    space = build_space(square4, topo4, CR_VECTOR)
    load = assemble_load(linear_field, space)
    # partition of unity: summing a component's loads integrates it
    np.testing.assert_allclose([load[0::2].sum(), load[1::2].sum()], [-0.5, 1.5])
    rows = assemble_mean_rows(space)
    v = interpolate(linear_field, space).to_full()
    np.testing.assert_allclose(rows @ v, [-0.5, 1.5])
    np.testing.assert_allclose(assemble_load(None, space), 0.0)


def test_write_coo(tmp_path):
    path = tmp_path / "m.coo"
    write_coo(sp.csr_matrix(np.array([[0.0, 2.0], [1.5, 0.0]])), str(path))
    assert path.read_text().splitlines() == ["2 2 2", "0 1 2", "1 0 1.5"]


def test_cr_coercivity_and_inf_sup(square4, topo4):
    vel = build_space(square4, topo4, CR_VECTOR, (DIRICHLET,))
    pres = build_space(square4, topo4, P0_SCALAR)
    assert coercivity_probe(vel).exact_value == pytest.approx(1.0)
    assert inf_sup_probe(vel, pres).sample_value > 0.05
    assert poincare_probe(vel).exact_value > 0


def test_dg_coercivity_depends_on_penalty(square4, topo4):
    space = build_space(square4, topo4, DG1_VECTOR)
    assert coercivity_probe(space, sigma=10.0).exact_value > 0
    assert not coercivity_probe(space, sigma=0.01).passed


def test_dg_penalty_is_linear_in_sigma(square4, topo4):
    space = build_space(square4, topo4, DG1_VECTOR)
    gram = assemble_jump_gram(space)
    difference = assemble_diffusion_dg(space, sigma=25.0) - assemble_diffusion_dg(space, sigma=5.0)
    assert abs(difference - 20.0 * gram).max() < 1e-10


def test_control_mass_measures_the_support(square4, topo4):
    cells = build_space(square4, topo4, P0_VECTOR)
    ones = np.ones(cells.full_dof_count)
    assert ones @ (assemble_control_mass(cells) @ ones) == pytest.approx(2.0)
    edges = build_space(square4, topo4, P0_BOUNDARY_VECTOR)
    ones = np.ones(edges.full_dof_count)
    assert ones @ (assemble_control_mass(edges) @ ones) == pytest.approx(8.0)


@pytest.mark.parametrize("method", ["cr", "dg"])
@pytest.mark.parametrize("neumann", [False, True])
def test_inf_sup_constant_is_mesh_independent(method, neumann):
    spec = neumann_demo() if neumann else example1().problem_spec()
    betas = []
    for n in (2, 4, 8, 16):
        vel, pres, _ = build_spaces(spec, generate_unit_square(n), method)
        betas.append(inf_sup_probe(vel, pres, neumann=spec.is_neumann).sample_value)
    assert min(betas) > 0.05
    assert betas[-1] >= 0.5 * max(betas)
