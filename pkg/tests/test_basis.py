import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import legendre as npleg

from semkit.basis import (
    DomainError,
    Space,
    gll_rule,
    interpolation_matrix,
    lagrange_eval,
    legendre_eval,
)


def test_gll_low_orders_match_closed_forms():
    x, w = gll_rule(1)
    np.testing.assert_allclose(x, [-1, 1])
    np.testing.assert_allclose(w, [1, 1])
    x, w = gll_rule(2)
    np.testing.assert_allclose(x, [-1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(w, [1 / 3, 4 / 3, 1 / 3], rtol=1e-14)
    # N=3: interior nodes are +-1/sqrt(5), weights 1/6 and 5/6
    x, w = gll_rule(3)
    np.testing.assert_allclose(x, [-1, -1 / np.sqrt(5), 1 / np.sqrt(5), 1], rtol=1e-14)
    np.testing.assert_allclose(w, [1 / 6, 5 / 6, 5 / 6, 1 / 6], rtol=1e-14)


@pytest.mark.parametrize("N", range(1, 16))
def test_gll_interior_nodes_are_roots_of_legendre_derivative(N):
    x, w = gll_rule(N)
    assert np.all(np.diff(x) > 0)
    if N > 1:
        dP = npleg.legder([0] * N + [1])
        np.testing.assert_allclose(npleg.legval(x[1:-1], dP), 0.0, atol=1e-11 * N**2)
    np.testing.assert_allclose(w.sum(), 2.0, rtol=1e-14)


@pytest.mark.parametrize("N", [1, 2, 5, 9, 14])
def test_gll_exact_up_to_degree_2N_minus_1(N):
    x, w = gll_rule(N)
    for k in range(2 * N):
        exact = 0.0 if k % 2 else 2.0 / (k + 1)
        assert abs(w @ x**k - exact) < 1e-13


def test_legendre_matches_numpy():
    xs = np.linspace(-1, 1, 41)
    for N in range(0, 12):
        L, dL = legendre_eval(N, xs)
        c = [0] * N + [1]
        np.testing.assert_allclose(L, npleg.legval(xs, c), atol=1e-13)
        np.testing.assert_allclose(dL, npleg.legval(xs, npleg.legder(c)), atol=1e-11)


def test_legendre_scalar_and_errors():
    L, dL = legendre_eval(3, 0.5)
    assert isinstance(L, float) and abs(L - (-0.4375)) < 1e-15
    with pytest.raises(ValueError):
        legendre_eval(-1, 0.0)
    with pytest.raises(DomainError):
        legendre_eval(2, 1.5)
    with pytest.raises(ValueError):
        gll_rule(0)


@pytest.mark.parametrize("N", [1, 3, 7, 10])
def test_lagrange_cardinality(N):
    s = Space.of_order(N)
    V = np.array([lagrange_eval(s, i, s.nodes) for i in range(s.n)])
    np.testing.assert_allclose(V, np.eye(s.n), atol=1e-13)
    # partition of unity off the nodes
    xs = np.linspace(-0.97, 0.97, 17)
    tot = sum(lagrange_eval(s, i, xs) for i in range(s.n))
    np.testing.assert_allclose(tot, 1.0, atol=1e-12)
    with pytest.raises(IndexError):
        lagrange_eval(s, N + 1, 0.0)


@pytest.mark.parametrize("N", [1, 2, 4, 7, 12])
def test_derivative_exact_on_polynomials(N):
    s = Space.of_order(N)
    x = s.nodes
    for k in range(N + 1):
        d = k * x ** (k - 1) if k else np.zeros_like(x)
        np.testing.assert_allclose(s.D @ x**k, d, atol=1e-11 * N**2)
    # rows annihilate constants
    np.testing.assert_allclose(s.D.sum(axis=1), 0.0, atol=1e-12 * N**2)


def test_derivative_corner_entries():
    for N in (2, 5, 8):
        D = Space.of_order(N).D
        assert abs(D[0, 0] + N * (N + 1) / 4) < 1e-12
        assert abs(D[N, N] - N * (N + 1) / 4) < 1e-12


def test_space_arrays_are_read_only():
    s = Space.of_order(4)
    assert Space.of_order(4) is s
    with pytest.raises(ValueError):
        s.D[0, 0] = 1.0


@settings(max_examples=40, deadline=None)
@given(src=st.integers(1, 9), dst=st.integers(1, 12), seed=st.integers(0, 2**16))
def test_interpolation_exact_for_source_polynomials(src, dst, seed):
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal(src + 1)
    a, b = Space.of_order(src), Space.of_order(dst)
    J = interpolation_matrix(a, b)
    f = np.polynomial.Polynomial(coeffs)
    np.testing.assert_allclose(J @ f(a.nodes), f(b.nodes), atol=1e-10 * np.abs(coeffs).sum())
    np.testing.assert_allclose(J.sum(axis=1), 1.0, atol=1e-12)
