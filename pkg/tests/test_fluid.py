import numpy as np
import pytest

from conftest import periodic_box

from semkit.comm import run_spmd
from semkit.fluid import (
    FluidSolver,
    StepFailure,
    TimeScheme,
    bdf_ext_coefficients,
    compute_cfl,
    diagnostics,
    init_state,
    init_tgv,
    step,
)
from semkit.krylov import SolverSettings
from semkit.mesh import build_box_mesh, partition_mesh
from semkit.operators import Discretization


@pytest.mark.parametrize("k", [1, 2, 3])
def test_bdf_ext_exact_on_polynomials(k):
    b, a = bdf_ext_coefficients(k)
    assert len(b) == k + 1 and len(a) == k
    ts = -np.arange(k + 1.0)  # t^{n+1} = 0, lags at -1, -2, ...
    for p in range(k + 1):
        # BDF-k differentiates degree <= k exactly at the new level
        deriv = p * 0.0 ** (p - 1) if p else 0.0
        assert np.dot(b, ts**p) == pytest.approx(deriv, abs=1e-13)
    for p in range(k):
        # EXT-k extrapolates degree < k exactly
        assert np.dot(a, ts[1:] ** p) == pytest.approx(0.0**p, abs=1e-13)


def test_scheme_validation():
    with pytest.raises(ValueError):
        TimeScheme(4, 1e-3)
    with pytest.raises(ValueError):
        TimeScheme(2, 0.0)
    with pytest.raises(ValueError):
        bdf_ext_coefficients(0)


@pytest.mark.parametrize("e,N", [(4, 7), (8, 9)])
def test_tgv_initial_invariants(e, N):
    d = periodic_box(e, N)
    g = diagnostics(init_tgv(d, 1600), d)
    # K = (1/2) int |u|^2 = pi^3 and E = int |curl u|^2 = 6 pi^3 on (0, 2 pi)^3
    assert abs(g["K"] / np.pi**3 - 1) < 1e-6
    assert abs(g["E"] / (6 * np.pi**3) - 1) < 1e-6
    assert g["eps"] == pytest.approx(2 / 1600 * g["E"])
    assert g["div"] < {7: 1e-5, 9: 1e-10}[N]


def test_init_tgv_needs_periodic_box():
    with pytest.raises(ValueError):
        init_tgv(Discretization(build_box_mesh(2, 2, 2), 3), 100)
    mesh = build_box_mesh(2, 2, 2, periodic=(True, True, True))
    with pytest.raises(ValueError):
        init_tgv(Discretization(mesh, 3), 100)


def test_zero_velocity_stays_zero():
    d = periodic_box(2, 4)
    st = init_state(d, 100.0)
    fs = FluidSolver(d, TimeScheme(3, 1e-2))
    for _ in range(4):
        fs.step(st)
    g = diagnostics(st, d)
    assert g["K"] == 0.0 and g["E"] == 0.0
    assert compute_cfl(st, d.coef, 1e-2) == 0.0


def test_short_tgv_run_properties():
    d = periodic_box(2, 5)
    st = init_tgv(d, 1600)
    fs = FluidSolver(d, TimeScheme(3, 1e-3), pressure=SolverSettings(tol=1e-8))
    K = [diagnostics(st, d)["K"]]
    for n in range(6):
        step(st, fs.scheme, fs)
        K.append(diagnostics(st, d)["K"])
        assert st.last["k"] == min(n + 1, 3)
        assert st.last["p_iters"] >= 1 and st.last["v_iters"] >= 3
    assert st.n == 6 and st.t == pytest.approx(6e-3)
    assert all(np.diff(K) < 0)
    assert st.last["div"] < 0.05
    assert 0 < compute_cfl(st, d.coef, 1e-3) < 0.05
    assert fs.ledger.check_hierarchy()
    names = {r[0] for r in fs.ledger.rows()}
    assert {"step", "step/pressure", "step/velocity"} <= names


def _self_convergence(k):
    d = periodic_box(2, 5)
    T = 0.05

    def run(dt):
        st = init_tgv(d, 100.0)
        fs = FluidSolver(d, TimeScheme(k, dt), pressure=SolverSettings(tol=1e-11, max_iter=500),
                         velocity=SolverSettings(tol=1e-13))
        for _ in range(int(round(T / dt))):
            fs.step(st)
        return st.u

    ref = run(T / 64)
    err = np.array([np.abs(run(T / n) - ref).max() for n in (4, 8, 16)])
    return np.log2(err[:-1] / err[1:])


@pytest.mark.parametrize("k,lo,hi", [(2, 1.7, 2.3), (3, 2.8, 3.2)])
def test_time_order(k, lo, hi):
    slopes = _self_convergence(k)
    assert lo < slopes[-1] < hi


def test_dirichlet_decaying_vortex():
    # exact 2-D Navier-Stokes solution in a walled box, periodic in z
    Re = 10.0
    dec = lambda t: np.exp(-2 * t / Re)  # noqa: E731
    U = lambda x, y, z, t: -np.cos(x) * np.sin(y) * dec(t)  # noqa: E731
    V = lambda x, y, z, t: np.sin(x) * np.cos(y) * dec(t)  # noqa: E731
    P = lambda x, y, z, t: -(np.cos(2 * x) + np.cos(2 * y)) / 4 * dec(t) ** 2  # noqa: E731
    mesh = build_box_mesh(2, 2, 1, ((0, np.pi), (0, np.pi), (0, 1)), (False, False, True))
    d = Discretization(mesh, 7)
    st = init_state(d, Re, {"u": U, "v": V, "p": P})
    fs = FluidSolver(d, TimeScheme(3, 0.02), pressure=SolverSettings(tol=1e-10, max_iter=1000),
                     velocity=SolverSettings(tol=1e-12), velocity_bc=lambda x, y, z, t: (U(x, y, z, t), V(x, y, z, t), 0.0))
    for _ in range(10):
        fs.step(st)
    assert np.abs(st.u - d.field(U, 0.2)).max() < 1e-6
    assert np.abs(st.w).max() < 1e-10
    p = st.p - d.mean(st.p)
    pe = d.field(P, 0.2)
    assert np.abs(p - (pe - d.mean(pe))).max() < 1e-5
    with pytest.raises(ValueError):
        FluidSolver(d, TimeScheme(3, 0.02), pressure_rhs="bdf")


def test_solver_option_validation():
    d = periodic_box(2, 3)
    s = TimeScheme(2, 1e-3)
    for kw in ({"startup": "euler"}, {"pressure_precon": "ilu"}, {"pressure_rhs": "implicit"}):
        with pytest.raises(ValueError):
            FluidSolver(d, s, **kw)
    FluidSolver(d, s, pressure_rhs="bdf", pressure_precon="jacobi", startup="plain")


def test_unconverged_pressure_raises():
    d = periodic_box(2, 4)
    st = init_tgv(d, 1600)
    fs = FluidSolver(d, TimeScheme(3, 1e-3), pressure=SolverSettings(tol=1e-14, max_iter=2, restart=2))
    with pytest.raises(StepFailure) as exc:
        fs.step(st)
    assert "pressure" in exc.value.residuals
    assert st.n == 0


def test_nonfinite_input_raises():
    d = periodic_box(2, 3)
    st = init_tgv(d, 1600)
    st.u[0, 1, 1, 1] = np.nan
    st.ulag = []
    with pytest.raises(StepFailure):
        FluidSolver(d, TimeScheme(1, 1e-3)).step(st)


def test_partitioned_steps_match_serial():
    mesh = build_box_mesh(2, 2, 2, ((0, 2 * np.pi),) * 3, (True, True, True))
    part = partition_mesh(mesh, 2)

    def work(comm):
        d = Discretization(mesh, 4, comm=comm, partition=part if comm.size > 1 else None)
        st = init_tgv(d, 1600)
        fs = FluidSolver(d, TimeScheme(3, 1e-3), pressure=SolverSettings(tol=1e-10), velocity=SolverSettings(tol=1e-12))
        for _ in range(3):
            fs.step(st)
        return d.elements, st.u

    serial = run_spmd(1, work)[0][1]
    for elems, u in run_spmd(2, work):
        np.testing.assert_allclose(u, serial[elems], atol=1e-9)
