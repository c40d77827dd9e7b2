import numpy as np
import pytest

from src.config import MethodConfig
from src.mesh import build_topology, generate_lshape, generate_unit_square
from src.optctrl import DISTRIBUTED, ProblemSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def square2():
    return generate_unit_square(2)


@pytest.fixture
def square4():
    return generate_unit_square(4)


@pytest.fixture
def lshape2():
    return generate_lshape(2)


@pytest.fixture
def topo4(square4):
    return build_topology(square4)


@pytest.fixture(params=["cr", "dg"])
def method_config(request):
    return MethodConfig(method=request.param)


@pytest.fixture
def cr_config():
    return MethodConfig(method="cr")


@pytest.fixture
def dg_config():
    return MethodConfig(method="dg")


def constant_field(cx, cy):
    def field(x, y):
        return np.stack([np.full_like(x, cx), np.full_like(x, cy)], axis=-1)

    return field


@pytest.fixture
def forced_spec():
    """Strong constant forcing that drives part of the control onto its bounds"""

    def f(x, y):
        return np.stack([40.0 * np.sin(np.pi * x), -30.0 * np.cos(np.pi * y)], axis=-1)

    def u_d(x, y):
        return np.stack([x - 0.5, 0.5 - y], axis=-1)

    return ProblemSpec(kind=DISTRIBUTED, f=f, u_d=u_d, lam=0.01, ya=-0.1, yb=0.25)
