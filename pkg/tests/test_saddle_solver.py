import numpy as np
import pytest
import scipy.sparse as sp

from src.errors import InvalidArgumentError, SolverFailureError
from src.saddle_solver import BlockSystem, solve_symmetric_indefinite


def _stokes_like():
    a = sp.csr_matrix(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    b = sp.csr_matrix(np.array([[1.0, 1.0]]))
    return BlockSystem.from_blocks(
        ["u", "p"],
        {"u": 2, "p": 1},
        {("u", "u"): a, ("u", "p"): b.T.tocsr(), ("p", "u"): b},
        {"u": np.array([1.0, 0.0])},
    )


def test_from_blocks_layout():
    system = _stokes_like()
    assert system.matrix.shape == (3, 3)
    assert system.layout == {"u": slice(0, 2), "p": slice(2, 3)}
    assert system.symmetry_error() == 0.0
    np.testing.assert_array_equal(system.rhs, [1.0, 0.0, 0.0])


def test_solve_saddle_point():
    system = _stokes_like()
    x = solve_symmetric_indefinite(system)
    u, p = system.block(x, "u"), system.block(x, "p")
    # divergence constraint u_0 + u_1 = 0
    assert u.sum() == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(system.matrix @ x, system.rhs, atol=1e-14)
    assert u[0] == pytest.approx(1.0 / 6.0)
    assert p[0] == pytest.approx(0.5)


def test_zero_size_blocks_are_dropped():
    system = BlockSystem.from_blocks(
        ["u", "mu"], {"u": 1, "mu": 0}, {("u", "u"): sp.csr_matrix([[4.0]])}, {"u": [2.0]}
    )
    assert "mu" not in system.layout
    assert system.block(np.zeros(1), "mu").size == 0
    np.testing.assert_allclose(solve_symmetric_indefinite(system), [0.5])


def test_zero_rhs_returns_zero():
    system = _stokes_like()
    system.rhs[:] = 0.0
    np.testing.assert_array_equal(solve_symmetric_indefinite(system), np.zeros(3))


def test_block_shape_checked():
    with pytest.raises(InvalidArgumentError):
        BlockSystem.from_blocks(["u"], {"u": 2}, {("u", "u"): sp.identity(3, format="csr")})


def test_singular_matrix_raises():
    system = BlockSystem.from_blocks(
        ["u", "p"],
        {"u": 2, "p": 1},
        {("u", "u"): sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))},
        {"u": np.array([1.0, 2.0])},
    )
    with pytest.raises(SolverFailureError):
        solve_symmetric_indefinite(system)
