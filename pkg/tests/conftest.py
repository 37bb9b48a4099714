import numpy as np
import pytest

from fields import ScalarField
from space import GraphSpec, build_from_graph, path_graph, two_point


@pytest.fixture
def x2():
    """Two points a, b at distance 1 with unit masses"""
    return two_point()


@pytest.fixture
def p3():
    return path_graph(3)


@pytest.fixture
def p5():
    return path_graph(5)


@pytest.fixture
def triangle():
    """a-b-c with a long a-c edge, so d(a, c) = 2 runs through b"""
    spec = GraphSpec(
        (("a", 1.0), ("b", 0.5), ("c", 2.0)),
        (("a", "b", 1.0), ("b", "c", 1.0), ("a", "c", 3.0)),
    )
    return build_from_graph(spec)


@pytest.fixture
def linear_x2(x2):
    return ScalarField(x2, [0.0, 1.0])


@pytest.fixture
def make_field():
    """Seeded uniform random field on a space"""
    def make(space, seed, low=-1.0, high=1.0):
        rng = np.random.default_rng(seed)
        return ScalarField(space, rng.uniform(low, high, size=space.n))
    return make
