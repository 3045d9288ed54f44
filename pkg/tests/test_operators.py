import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_operators
from test_mesh import perturbed_box

from semkit.mesh import build_box_mesh
from semkit.operators import Discretization, helmholtz_diagonal

MESHES = {
    "cube1": lambda: build_box_mesh(1, 1, 1),
    "slab": lambda: build_box_mesh(2, 1, 1, ((0, 2), (0, 0.5), (0, 1))),
    "block4": lambda: build_box_mesh(2, 2, 1, ((-1, 1), (0, 1), (0, 3))),
    "cube8": lambda: build_box_mesh(2, 2, 2),
    "px": lambda: build_box_mesh(2, 1, 2, ((0, 1), (0, 1), (0, 2)), (True, False, False)),
    "pxyz": lambda: build_box_mesh(2, 2, 2, ((0, 2 * np.pi),) * 3, (True, True, True)),
    "deformed": perturbed_box,
}


def column_errors(mesh, N, h1=0.7, h2=2.3):
    """Worst relative column mismatch of Poisson, Helmholtz and mass."""
    A, M, ids = dense_operators(mesh, N)
    d = Discretization(mesh, N)
    ids = ids.reshape(d.shape)
    # match the oracle's numbering to the package's by position
    worst = {"poisson": 0.0, "helmholtz": 0.0, "mass": 0.0}
    H = h1 * A + h2 * M
    for j in range(A.shape[0]):
        u = (ids == j).astype(float)
        for name, dense, mf in (
            ("poisson", A, d.poisson),
            ("helmholtz", H, lambda v: d.helmholtz(v, h1, h2)),
            ("mass", M, d.mass),
        ):
            ref = dense[ids, j]
            got = mf(u)
            err = np.linalg.norm(got - ref) / np.linalg.norm(ref)
            worst[name] = max(worst[name], err)
    return worst


@pytest.mark.parametrize("N", [1, 2, 3, 4])
@pytest.mark.parametrize("name", sorted(MESHES))
def test_matrix_free_matches_dense(name, N, backend):
    worst = column_errors(MESHES[name](), N)
    for op, err in worst.items():
        assert err < 1e-11, (op, err)


@pytest.mark.parametrize("name", ["cube8", "pxyz", "deformed"])
def test_diagonal_matches_dense(name):
    mesh = MESHES[name]()
    A, M, ids = dense_operators(mesh, 3)
    d = Discretization(mesh, 3)
    got = helmholtz_diagonal(d.coef, 0.5, 1.5, d.gs)
    ref = (0.5 * np.diag(A) + 1.5 * np.diag(M))[ids.reshape(d.shape)]
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_stiffness_kills_constants_and_mass_integrates():
    d = Discretization(build_box_mesh(2, 2, 2, ((0, 2 * np.pi),) * 3, (True,) * 3), 5)
    one = np.ones(d.shape)
    assert np.abs(d.poisson(one)).max() < 1e-11
    assert abs(d.dot(d.mass(one), one) - (2 * np.pi) ** 3) < 1e-10


def _sym_check(d, rng, op):
    u = d.average(rng.standard_normal(d.shape))
    v = d.average(rng.standard_normal(d.shape))
    a, b = d.dot(op(u), v), d.dot(u, op(v))
    return abs(a - b) / (abs(a) + abs(b))


@settings(max_examples=15, deadline=None)
@given(N=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_operators_symmetric_positive(N, seed):
    rng = np.random.default_rng(seed)
    d = Discretization(perturbed_box(0.1), N)
    assert _sym_check(d, rng, d.poisson) < 1e-12
    assert _sym_check(d, rng, lambda u: d.helmholtz(u, 1.3, 0.4)) < 1e-12
    u = d.average(rng.standard_normal(d.shape))
    assert d.dot(d.helmholtz(u, 1.0, 1.0), u) > 0


@pytest.mark.parametrize("N", [4, 7])
def test_pointwise_derivatives_spectral(N):
    d = Discretization(build_box_mesh(2, 2, 2, ((0, 2 * np.pi),) * 3, (True,) * 3), N)
    c = d.coef
    u = np.sin(c.x) * np.cos(c.y) * np.cos(c.z)
    v = -np.cos(c.x) * np.sin(c.y) * np.cos(c.z)
    w = np.zeros_like(u)
    tol = {4: 5e-2, 7: 2e-3}[N]
    assert np.abs(d.dx(u, 0) - np.cos(c.x) * np.cos(c.y) * np.cos(c.z)).max() < tol
    assert np.abs(d.divergence(u, v, w)).max() < tol
    wx, wy, wz = d.curl(u, v, w)
    assert np.abs(wz - 2 * np.sin(c.x) * np.sin(c.y) * np.cos(c.z)).max() < tol
    ax, ay, az = d.advection(u, v, w)
    # (u . grad) u for this field: x-component 0.5 sin 2x (cos^2 z)
    assert np.abs(ax - 0.5 * np.sin(2 * c.x) * np.cos(c.z) ** 2).max() < 5 * tol


def test_shape_checks():
    d = Discretization(build_box_mesh(1, 1, 1), 2)
    with pytest.raises(ValueError):
        d.poisson(np.zeros((1, 4, 4, 4)))
    with pytest.raises(ValueError):
        d.dx(d.zeros(), 3)


@pytest.mark.parametrize("name", sorted(MESHES))
@pytest.mark.parametrize("N", [1, 3])
def test_dirichlet_mask_matches_coordinates(name, N):
    # a slot is masked iff it sits on a non-periodic face of the domain box
    mesh = MESHES[name]()
    d = Discretization(mesh, N)
    c = d.coef
    on = np.zeros(d.shape, dtype=bool)
    for ax, X in enumerate((c.x, c.y, c.z)):
        if not mesh.periodic[ax]:
            lo, hi = mesh.extents[ax]
            on |= (np.abs(X - lo) < 1e-9) | (np.abs(X - hi) < 1e-9)
    np.testing.assert_array_equal(d.mask == 0, on)
    assert d.has_boundary == bool(on.any())
