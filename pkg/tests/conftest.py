import numpy as np
import pytest

from lbkernel.mesh import disjoint_union
from lbkernel.spectral import assemble_cotan, solve_eigen
from lbkernel.synthetic import icosahedron, sphere, unit_sphere


@pytest.fixture(scope="session")
def ico():
    return icosahedron()


@pytest.fixture(scope="session")
def sphere2():
    """Level-2 unit sphere, 162 vertices."""
    return unit_sphere(2)


@pytest.fixture(scope="session")
def sphere2_full(sphere2):
    return solve_eigen(assemble_cotan(sphere2), sphere2.n_vertices)


@pytest.fixture(scope="session")
def sphere3():
    return unit_sphere(3)


@pytest.fixture(scope="session")
def sphere3_basis(sphere3):
    return solve_eigen(assemble_cotan(sphere3), 120)


@pytest.fixture(scope="session")
def two_spheres():
    return disjoint_union(sphere(1, 1.0), sphere(1, 2.0, center=(5.0, 0.0, 0.0)))


@pytest.fixture(scope="session")
def two_spheres_full(two_spheres):
    return solve_eigen(assemble_cotan(two_spheres), two_spheres.n_vertices)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# --------------------------------------------------------------------------
# acceptance lines: printed as they run and repeated in the terminal summary

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    lines = request.config.stash[_ACCEPTANCE]

    def record(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f": {detail}" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
