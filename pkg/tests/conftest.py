import numpy as np
import pytest

from ecgipf.forward import build_dipole_layer
from ecgipf.geodesic import build_table
from ecgipf.mesh import TriMesh, make_test_mesh, sphere_electrodes


@pytest.fixture(scope="session")
def ico0():
    return make_test_mesh("sphere", 30.0, 0)


@pytest.fixture(scope="session")
def sphere2():
    return make_test_mesh("sphere", 30.0, 2)


@pytest.fixture(scope="session")
def sphere3():
    return make_test_mesh("sphere", 30.0, 3)


@pytest.fixture(scope="session")
def table2(sphere2):
    return build_table(sphere2)


@pytest.fixture(scope="session")
def table3(sphere3):
    return build_table(sphere3)


@pytest.fixture(scope="session")
def operator2(sphere2):
    return build_dipole_layer(sphere2, sphere_electrodes(32, 45.0))


@pytest.fixture
def tetra():
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriMesh(v, f)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
