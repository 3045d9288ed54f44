"""
Gauss-Lobatto-Legendre nodal basis on the reference interval [-1, 1].
"""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "DomainError",
    "Space",
    "legendre_eval",
    "gll_rule",
    "lagrange_eval",
    "derivative_matrix",
    "interpolation_matrix",
]

_NEWTON_TOL = 1e-15
_NEWTON_MAXIT = 50


class DomainError(ValueError):
    """Argument outside the reference interval."""


def legendre_eval(N, x):
    """
    Legendre polynomial L_N and its derivative by the three-term recurrence.

    Parameters
    ----------
    N : int
        Degree, N >= 0.
    x : float or array_like
        Evaluation point(s) in [-1, 1].

    Returns
    -------
    (L, dL) : tuple
        Values of L_N(x) and L_N'(x), scalars if `x` is scalar.
    """
    if N < 0:
        raise ValueError(f"degree must be >= 0, got {N}")
    xa = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(xa) > 1.0 + 1e-12):
        raise DomainError("legendre_eval requires |x| <= 1")
    p_prev = np.ones_like(xa)
    dp_prev = np.zeros_like(xa)
    if N == 0:
        L, dL = p_prev, dp_prev
    else:
        p = xa.copy()
        dp = np.ones_like(xa)
        for k in range(1, N):
            p_next = ((2 * k + 1) * xa * p - k * p_prev) / (k + 1)
            # L'_{k+1} = L'_{k-1} + (2k+1) L_k
            dp_next = dp_prev + (2 * k + 1) * p
            p_prev, p = p, p_next
            dp_prev, dp = dp, dp_next
        L, dL = p, dp
    if np.ndim(x) == 0:
        return float(L), float(dL)
    return L, dL


def gll_rule(N):
    """
    GLL nodes (roots of (1 - x^2) L_N'(x)) and weights 2 / (N (N+1) L_N^2).

    Newton iteration seeded with Chebyshev-Gauss-Lobatto points.
    """
    if N < 1:
        raise ValueError(f"GLL rule needs N >= 1, got {N}")
    x = -np.cos(np.pi * np.arange(N + 1) / N)
    for _ in range(_NEWTON_MAXIT):
        L, _ = legendre_eval(N, np.clip(x, -1.0, 1.0))
        Lm1, _ = legendre_eval(N - 1, np.clip(x, -1.0, 1.0))
        # Newton step for (1 - x^2) L_N'(x), written with L_N and L_{N-1}
        update = (x * L - Lm1) / ((N + 1) * L)
        x = x - update
        if np.max(np.abs(update)) <= _NEWTON_TOL:
            break
    else:
        raise RuntimeError(f"GLL Newton iteration did not converge for N={N}")
    x = 0.5 * (x - x[::-1])
    x[0], x[-1] = -1.0, 1.0
    if N % 2 == 0:
        x[N // 2] = 0.0
    L, _ = legendre_eval(N, x)
    w = 2.0 / (N * (N + 1) * L**2)
    w = 0.5 * (w + w[::-1])
    return x, w


def _derivative_matrix(nodes, N):
    L, _ = legendre_eval(N, nodes)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    D = (L[:, None] / L[None, :]) / diff
    np.fill_diagonal(D, 0.0)
    # diagonal from the row-sum identity: exact annihilation of constants
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


@dataclass(frozen=True)
class Space:
    """Order-N GLL space: nodes, weights and derivative matrix D[i, j] = l_j'(x_i)."""

    N: int
    nodes: np.ndarray = field(repr=False, compare=False)
    weights: np.ndarray = field(repr=False, compare=False)
    D: np.ndarray = field(repr=False, compare=False)

    @property
    def n(self):
        """Points per direction, N + 1."""
        return self.N + 1

    @staticmethod
    @lru_cache(maxsize=None)
    def of_order(N: int) -> "Space":
        nodes, weights = gll_rule(N)
        D = _derivative_matrix(nodes, N)
        for a in (nodes, weights, D):
            a.setflags(write=False)
        return Space(N, nodes, weights, D)


def lagrange_eval(space: Space, i: int, x):
    """Cardinal GLL interpolant l_i evaluated at x (scalar or array)."""
    N = space.N
    if not 0 <= i <= N:
        raise IndexError(f"node index {i} outside 0..{N}")
    xa = np.asarray(x, dtype=np.float64)
    xi = space.nodes[i]
    L_i, _ = legendre_eval(N, xi)
    _, dL = legendre_eval(N, np.clip(xa, -1.0, 1.0))
    dx = xa - xi
    at_node = np.abs(dx) < 1e-14
    safe = np.where(at_node, 1.0, dx)
    val = -(1.0 - xa**2) * dL / (N * (N + 1) * L_i * safe)
    val = np.where(at_node, 1.0, val)
    if np.ndim(x) == 0:
        return float(val)
    return val


def derivative_matrix(space: Space) -> np.ndarray:
    return space.D


def interpolation_matrix(src: Space, dst: Space) -> np.ndarray:
    """J[i, j] = l_j^{src}(x_i^{dst}); maps nodal values on `src` to `dst`."""
    J = np.empty((dst.n, src.n))
    for j in range(src.n):
        J[:, j] = lagrange_eval(src, j, dst.nodes)
    # rows at coincident nodes become exact unit rows
    for i, xd in enumerate(dst.nodes):
        hit = np.nonzero(np.abs(src.nodes - xd) < 1e-14)[0]
        if hit.size:
            J[i, :] = 0.0
            J[i, hit[0]] = 1.0
    return J
