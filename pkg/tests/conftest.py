import numpy as np
import pytest

from semkit import _accel
from semkit.mesh import build_box_mesh
from semkit.operators import Discretization

TWO_PI = 2 * np.pi


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=[False, True], ids=["numpy", "numba"])
def backend(request):
    """Run a test on both kernel paths (numba skipped when unavailable)."""
    if request.param and not _accel.HAVE_NUMBA:
        pytest.skip("numba not importable")
    prev = _accel.set_numba(request.param)
    yield request.param
    _accel.set_numba(prev)


def periodic_box(e, N, **kw):
    mesh = build_box_mesh(e, e, e, ((0, TWO_PI),) * 3, (True, True, True))
    return Discretization(mesh, N, **kw)


def dirichlet_box(e, N, **kw):
    mesh = build_box_mesh(e, e, e)
    return Discretization(mesh, N, **kw)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        terminalreporter.write_line(results[key])
