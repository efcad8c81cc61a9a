import numpy as np
import pytest

from dfnopt.assembly import discretize
from dfnopt.benchmarks import builtin_dfn3
from dfnopt.geometry import BoundaryCondition, Fracture, FractureNetwork
from dfnopt.optimizer import ReducedProblem


def unit_square(z=0.0, fid=0, bcs=None, K=1.0, source=0.0):
    v = [(0, 0, z), (1, 0, z), (1, 1, z), (0, 1, z)]
    return Fracture(fid, v, K, bcs or [], source)


def cross_pair(bc_lo=1.0, bc_hi=0.0):
    """Two perpendicular unit squares meeting along x = 0.5 in the z = 0 plane."""
    f0 = Fracture(0, [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)], 1.0,
                  [None, None, None, BoundaryCondition("dirichlet", bc_lo)])
    f1 = Fracture(1, [(0.5, 0, -0.5), (0.5, 1, -0.5), (0.5, 1, 0.5), (0.5, 0, 0.5)], 2.0,
                  [BoundaryCondition("dirichlet", bc_hi)])
    return FractureNetwork.from_fractures([f0, f1], name="cross")


@pytest.fixture(scope="session")
def dfn3():
    return builtin_dfn3()


@pytest.fixture(scope="session")
def dfn3_gs(dfn3):
    """Coarse DFN3 instance, 335 total DOFs."""
    net, _ = dfn3
    return discretize(net, 0.02, 0.5, 0.3)


@pytest.fixture(scope="session")
def dfn3_problem(dfn3_gs):
    return ReducedProblem(dfn3_gs)


@pytest.fixture(scope="session")
def tiny_gs(dfn3):
    net, _ = dfn3
    return discretize(net, 0.2, 0.5, 0.3)


@pytest.fixture(scope="session")
def tiny_problem(tiny_gs):
    return ReducedProblem(tiny_gs)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES = []


def acceptance_line(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
            terminalreporter.write_line(line)
