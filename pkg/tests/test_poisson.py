import numpy as np
import pytest

from conftest import dirichlet_box, periodic_box

from semkit.expr import compile_expr, compile_laplacian
from semkit.krylov import SolverSettings
from semkit.mesh import build_box_mesh
from semkit.poisson import poisson_errors, poisson_study, solve_poisson

SINE = "sin(pi*x)*sin(pi*y)*sin(pi*z)"


def _study(src, orders, mesh=None):
    exact = compile_expr(src)
    lap = compile_laplacian(src)
    return poisson_study(mesh or build_box_mesh(2, 2, 2), orders, exact, lambda x, y, z: -lap(x, y, z))


def test_spectral_convergence():
    rows = _study(SINE, [2, 4, 6, 8])
    err = [r["linf"] for r in rows]
    assert all(a / b > 10 for a, b in zip(err, err[1:]))
    assert err[-1] < 1e-8
    assert [r["dofs"] for r in rows] == [(2 * N + 1) ** 3 for N in (2, 4, 6, 8)]
    assert all(r["l2"] <= r["linf"] for r in rows)


def test_constant_solution_exact():
    for r in _study("2.5", [1, 3, 5]):
        assert r["linf"] < 1e-12


def test_polynomial_reproduced():
    # quadratic data lies in the space from N = 2 on
    for r in _study("x*x + y*z - z", [2, 3]):
        assert r["linf"] < 1e-11


def test_inhomogeneous_boundary_partially_periodic():
    mesh = build_box_mesh(2, 2, 2, ((0, 2 * np.pi), (0, 1), (0, 1)), (True, False, False))
    rows = _study("cos(x)*(1 + y*y)*exp(z)", [4, 8], mesh)
    assert rows[1]["linf"] < 1e-6 < rows[0]["linf"]


def test_solve_poisson_arguments():
    d = dirichlet_box(2, 3)
    u, res = solve_poisson(d, np.zeros(d.shape), settings=SolverSettings(tol=1e-12))
    assert res.converged and np.all(u == 0)
    linf, l2 = poisson_errors(d, u, lambda x, y, z: 0 * x)
    assert linf == 0 and l2 == 0
    with pytest.raises(ValueError):
        solve_poisson(periodic_box(2, 3), lambda x, y, z: np.sin(x))
