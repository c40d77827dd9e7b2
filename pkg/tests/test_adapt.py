import itertools

import numpy as np
import pytest

from src.adapt import (
    HISTORY_COLUMNS,
    ConvergenceHistory,
    LevelRecord,
    adaptive_loop,
    doerfler_mark,
)
from src.config import MethodConfig
from src.errors import InvalidArgumentError, LevelFailureError, SolverFailureError
from src.mesh import generate_lshape, generate_unit_square
from src.verify import eoc, example1, example2


def test_doerfler_example():
    marked, terminal = doerfler_mark([16.0, 9.0, 4.0, 1.0], 0.3)
    np.testing.assert_array_equal(marked, [0])
    assert not terminal


def test_doerfler_is_minimal(rng):
    eta_sq = rng.uniform(0.0, 1.0, 8)
    for theta in (0.1, 0.5, 0.9):
        marked, _ = doerfler_mark(eta_sq, theta)
        assert eta_sq[marked].sum() >= theta * eta_sq.sum()
        smallest = min(
            k
            for k in range(1, 9)
            if any(eta_sq[list(s)].sum() >= theta * eta_sq.sum() for s in itertools.combinations(range(8), k))
        )
        assert len(marked) == smallest


def test_doerfler_ties_in_index_order():
    marked, _ = doerfler_mark([1.0, 1.0, 1.0, 1.0], 0.5)
    np.testing.assert_array_equal(marked, [0, 1])


def test_doerfler_full_bulk_and_zero():
    marked, terminal = doerfler_mark([0.0, 2.0, 0.0, 1.0], 1.0)
    np.testing.assert_array_equal(marked, [1, 3])
    marked, terminal = doerfler_mark(np.zeros(5), 0.3)
    assert marked.size == 0 and terminal


@pytest.mark.parametrize("theta", [0.0, 1.5, -0.2])
def test_doerfler_invalid_theta(theta):
    with pytest.raises(InvalidArgumentError):
        doerfler_mark([1.0, 2.0], theta)


def test_doerfler_invalid_values():
    with pytest.raises(InvalidArgumentError):
        doerfler_mark([1.0, -1.0], 0.3)
    with pytest.raises(InvalidArgumentError):
        doerfler_mark([1.0, np.nan], 0.3)


def test_history_requires_growing_ndof():
    history = ConvergenceHistory()
    history.add(LevelRecord(level=0, Ndof=40, h=0.5, eta_total=1.0))
    with pytest.raises(InvalidArgumentError):
        history.add(LevelRecord(level=1, Ndof=40, h=0.25, eta_total=0.5))
    frame = history.to_frame()
    assert list(frame.columns) == HISTORY_COLUMNS
    assert np.isnan(frame.loc[0, "err_y"])
    assert list(ConvergenceHistory().to_frame().columns) == HISTORY_COLUMNS


def test_adaptive_loop_on_smooth_case(cr_config):
    case = example1()
    history = adaptive_loop(
        case.problem_spec(), cr_config, theta=0.3, max_ndof=400, case=case,
        initial_mesh=generate_unit_square(2),
    )
    ndof = history.column("Ndof")
    assert len(history) >= 2
    assert np.all(np.diff(ndof) > 0)
    assert ndof[-1] >= 400
    assert ndof[-2] < 400
    assert history.final_mesh.n_triangles > 8
    assert np.all(history.column("err_u_energy") > 0)
    assert history.records[0].n_marked > 0
    eta = history.column("eta_total")
    assert eta[-1] < eta[0]


def test_single_level_when_budget_is_tiny(cr_config):
    case = example1()
    history = adaptive_loop(case.problem_spec(), cr_config, max_ndof=1, initial_mesh=generate_unit_square(2))
    assert len(history) == 1
    assert np.isnan(history.records[0].err_u_energy)
    assert history.records[0].eta_total > 0


def test_uniform_mode_refines_everything(cr_config):
    case = example1()
    history = adaptive_loop(
        case.problem_spec(), cr_config, max_ndof=200, initial_mesh=generate_unit_square(2), uniform=True
    )
    assert history.mode == "uniform"
    first = history.records[0]
    assert first.n_marked == 8


def test_missing_mesh_raises(cr_config):
    with pytest.raises(InvalidArgumentError):
        adaptive_loop(example1().problem_spec(), cr_config)


def test_solver_failure_names_the_level(monkeypatch, cr_config):
    def failing(spec, mesh, config):
        raise SolverFailureError("singular")

    monkeypatch.setattr("src.adapt.solve_optimality", failing)
    with pytest.raises(LevelFailureError) as info:
        adaptive_loop(example1().problem_spec(), cr_config, initial_mesh=generate_unit_square(2))
    assert info.value.level == 0


ERROR_COLUMNS = ["err_u_energy", "err_p_l2", "err_phi_energy", "err_r_l2", "err_y"]


def _total_error(history):
    return sum(history.column(name) for name in ERROR_COLUMNS)


def _fitted_rate(history, values, last=5):
    """Least-squares slope of log(values) against log(Ndof) over the final levels"""
    ndof = history.column("Ndof")[-last:]
    return -np.polyfit(np.log(ndof), np.log(values[-last:]), 1)[0]


def _efficiency_spread(history):
    efficiency = history.column("eta_total") / _total_error(history)
    return efficiency.max() / efficiency.min()


@pytest.mark.slow
def test_corner_refinement_and_rates():
    case = example2()
    config = MethodConfig(method="cr", error_order=8, estimator_order=8)
    history = adaptive_loop(
        case.problem_spec(), config, theta=0.3, max_ndof=20000, case=case, initial_mesh=generate_lshape(2)
    )
    mesh = history.final_mesh
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    smallest = np.argmin(mesh.signed_areas)
    assert np.linalg.norm(centroids[smallest]) < 0.1
    rates = eoc(history, "eta_total", wrt="Ndof")
    assert np.mean(rates[-3:]) > 0.4
    assert _fitted_rate(history, history.column("eta_total")) == pytest.approx(0.5, abs=0.07)
    assert _fitted_rate(history, _total_error(history)) == pytest.approx(0.5, abs=0.07)
    assert _efficiency_spread(history) <= 3.0


@pytest.mark.slow
def test_corner_uniform_refinement_rate():
    case = example2()
    config = MethodConfig(method="cr", error_order=8, estimator_order=8)
    history = adaptive_loop(
        case.problem_spec(), config, max_ndof=20000, case=case, initial_mesh=generate_lshape(2), uniform=True
    )
    assert history.mode == "uniform"
    assert _fitted_rate(history, _total_error(history), last=3) == pytest.approx(0.25, abs=0.05)
    assert _efficiency_spread(history) <= 3.0
