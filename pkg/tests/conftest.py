import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from activetouch.geometry import TriangleMesh
from activetouch.sdf import make_object_model, primitive_grid

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SPHERE = {"type": "sphere", "radius": 1.0}


def unit_cube_mesh(half=0.5) -> TriangleMesh:
    v = np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)])
    # outward-wound faces of the cube with vertex index = 4x + 2y + z
    f = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    return TriangleMesh(v, np.array(f))


@pytest.fixture(scope="session")
def sphere_model():
    return make_object_model(0, "sphere", primitive_grid(SPHERE, 64), SPHERE, n_features=200, seed=3)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record and print one pass/fail line for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return ok
    return record
