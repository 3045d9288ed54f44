"""
Field kernels on element-lattice arrays of shape (E, n, n, n).

Every kernel records its static cost in the active ledger (if any). The
numpy bodies are dtype-generic on purpose: running them on object arrays
of counting scalars is how the static costs are checked. The tensor
kernels also carry a numba path for float64 input, selected by
``SEMKIT_USE_NUMBA``.
"""
import numpy as np

from . import _accel
from .cost import record

__all__ = [
    "dr", "ds", "dt",
    "copy", "add2", "add3", "sub2", "sub3", "cmult", "cmult2", "cadd",
    "add2s1", "axpy", "col2", "col3", "addcol3", "invcol1", "glsc2", "glsc3",
    "ax_poisson", "ax_helmholtz", "dudxyz", "opgrad", "cdtp", "convect",
    "prolong", "restrict", "schwarz_local",
]


def _EN(a):
    return a.shape[0], a.shape[1] - 1


def _rec(name, a, **kw):
    if a.ndim == 4:
        E, N = _EN(a)
        record(name, E, N, **kw)


# -- 1-D contractions along the r, s, t lattice directions -------------------


def dr(A, u):
    """out[e, a, j, k] = sum_i A[a, i] u[e, i, j, k]"""
    E, n = u.shape[0], u.shape[1]
    m = A.shape[0]
    return np.matmul(A, u.reshape(E, n, -1)).reshape((E, m) + u.shape[2:])


def ds(A, u):
    """out[e, i, a, k] = sum_j A[a, j] u[e, i, j, k]"""
    return np.matmul(A, u)


def dt(A, u):
    """out[e, i, j, a] = sum_k A[a, k] u[e, i, j, k]"""
    return np.matmul(u, A.T)


# -- vector kernels ------------------------------------------------------------


def copy(a):
    _rec("copy", a)
    return a.copy()


def add2(a, b):
    _rec("add2", a)
    a += b
    return a


def add3(a, b):
    _rec("add3", a)
    return a + b


def sub2(a, b):
    _rec("sub2", a)
    a -= b
    return a


def sub3(a, b):
    _rec("sub3", a)
    return a - b


def cmult(a, s):
    _rec("cmult", a)
    a *= s
    return a


def cmult2(a, s):
    _rec("cmult2", a)
    return a * s


def cadd(a, s):
    _rec("cadd", a)
    a += s
    return a


def add2s1(a, b, s):
    """a = s * a + b"""
    _rec("add2s1", a)
    a *= s
    a += b
    return a


def axpy(y, s, x):
    """y += s * x"""
    _rec("axpy", y)
    y += s * x
    return y


def col2(a, b):
    _rec("col2", a)
    a *= b
    return a


def col3(a, b):
    _rec("col3", a)
    return a * b


def addcol3(a, b, c):
    _rec("addcol3", a)
    a += b * c
    return a


def invcol1(a):
    _rec("invcol1", a)
    return 1.0 / a


def glsc2(a, b):
    _rec("glsc2", a)
    return np.add.reduce((a * b).ravel(), initial=0.0)


def glsc3(a, b, c):
    _rec("glsc3", a)
    return np.add.reduce((a * b * c).ravel(), initial=0.0)


# -- tensor-product operator kernels -------------------------------------------


def _ax_np(u, G, D):
    DT = D.T
    ur, us, ut = dr(D, u), ds(D, u), dt(D, u)
    wr = G[0] * ur + G[3] * us + G[4] * ut
    ws = G[3] * ur + G[1] * us + G[5] * ut
    wt = G[4] * ur + G[5] * us + G[2] * ut
    return dr(DT, wr) + ds(DT, ws) + dt(DT, wt)


@_accel.njit
def _ax_nb(u, G, D, h1, h2, B, helm):
    # loop orders keep the innermost index contiguous in memory
    E, n = u.shape[0], u.shape[1]
    w = np.empty_like(u)
    ur = np.empty((n, n, n))
    us = np.empty((n, n, n))
    ut = np.empty((n, n, n))
    wr = np.empty((n, n, n))
    ws = np.empty((n, n, n))
    wt = np.empty((n, n, n))
    for e in range(E):
        ue = u[e]
        ur[:] = 0.0
        us[:] = 0.0
        for i in range(n):
            for m in range(n):
                d = D[i, m]
                for j in range(n):
                    for k in range(n):
                        ur[i, j, k] += d * ue[m, j, k]
        for i in range(n):
            for j in range(n):
                for m in range(n):
                    d = D[j, m]
                    for k in range(n):
                        us[i, j, k] += d * ue[i, m, k]
                for k in range(n):
                    c = 0.0
                    for m in range(n):
                        c += D[k, m] * ue[i, j, m]
                    ut[i, j, k] = c
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    a = ur[i, j, k]
                    b = us[i, j, k]
                    c = ut[i, j, k]
                    g3 = G[3, e, i, j, k]
                    g4 = G[4, e, i, j, k]
                    g5 = G[5, e, i, j, k]
                    wr[i, j, k] = G[0, e, i, j, k] * a + g3 * b + g4 * c
                    ws[i, j, k] = g3 * a + G[1, e, i, j, k] * b + g5 * c
                    wt[i, j, k] = g4 * a + g5 * b + G[2, e, i, j, k] * c
        we = w[e]
        we[:] = 0.0
        for i in range(n):
            for m in range(n):
                d = D[m, i]
                for j in range(n):
                    for k in range(n):
                        we[i, j, k] += d * wr[m, j, k]
        for i in range(n):
            for j in range(n):
                for m in range(n):
                    d = D[m, j]
                    for k in range(n):
                        we[i, j, k] += d * ws[i, m, k]
                for k in range(n):
                    c = 0.0
                    for m in range(n):
                        c += D[m, k] * wt[i, j, m]
                    we[i, j, k] += c
        if helm:
            for i in range(n):
                for j in range(n):
                    for k in range(n):
                        we[i, j, k] = h1 * we[i, j, k] + h2 * B[e, i, j, k] * ue[i, j, k]
    return w


def _use_numba(u):
    return _accel.USE_NUMBA and u.dtype == np.float64


def ax_poisson(u, G, D):
    """Element-local stiffness action D^T G D u (no assembly)."""
    _rec("ax_poisson", u)
    if _use_numba(u):
        return _ax_nb(np.ascontiguousarray(u), G, D, 1.0, 0.0, u, False)
    return _ax_np(u, G, D)


def ax_helmholtz(u, G, D, B, h1, h2):
    """Element-local h1 * stiffness + h2 * mass action."""
    _rec("ax_helmholtz", u)
    if _use_numba(u):
        return _ax_nb(np.ascontiguousarray(u), G, D, float(h1), float(h2), B, True)
    w = _ax_np(u, G, D)
    return h1 * w + (h2 * B) * u


def dudxyz(u, dxidx, D, axis):
    """Pointwise physical derivative along `axis` (element-local)."""
    _rec("dudxyz", u)
    ur, us, ut = dr(D, u), ds(D, u), dt(D, u)
    return dxidx[0, axis] * ur + dxidx[1, axis] * us + dxidx[2, axis] * ut


def opgrad(u, dxidx, D):
    _rec("opgrad", u)
    ur, us, ut = dr(D, u), ds(D, u), dt(D, u)
    return tuple(
        dxidx[0, a] * ur + dxidx[1, a] * us + dxidx[2, a] * ut for a in range(3)
    )


def cdtp(f, dxidx, B, D, axis):
    """Weak derivative transpose: sum_r D_r^T (B * dxi_r/dx_axis * f)."""
    _rec("cdtp", f)
    bf = B * f
    wr = dxidx[0, axis] * bf
    ws = dxidx[1, axis] * bf
    wt = dxidx[2, axis] * bf
    DT = D.T
    return dr(DT, wr) + ds(DT, ws) + dt(DT, wt)


def convect(phi, u, v, w, dxidx, D):
    """Pointwise (u . grad) phi on the element lattice."""
    _rec("convect", phi)
    pr, ps, pt = dr(D, phi), ds(D, phi), dt(D, phi)
    gx = dxidx[0, 0] * pr + dxidx[1, 0] * ps + dxidx[2, 0] * pt
    gy = dxidx[0, 1] * pr + dxidx[1, 1] * ps + dxidx[2, 1] * pt
    gz = dxidx[0, 2] * pr + dxidx[1, 2] * ps + dxidx[2, 2] * pt
    return u * gx + v * gy + w * gz


def prolong(uc, J):
    """Coarse (E, 2, 2, 2) lattice to fine (E, n, n, n) by tensor interpolation."""
    E, n1 = uc.shape[0], J.shape[0]
    record("prolong", E, n1 - 1)
    return dt(J, ds(J, dr(J, uc)))


def restrict(uf, J):
    """Transpose of :func:`prolong`."""
    E, n1 = uf.shape[0], J.shape[0]
    record("restrict", E, n1 - 1)
    JT = J.T
    return dt(JT, ds(JT, dr(JT, uf)))


def schwarz_local(inv, r):
    """Per-element dense solves: out[e] = inv[e] @ r[e].ravel()."""
    E, N = _EN(r)
    record("schwarz_local", E, N)
    return np.matmul(inv, r.reshape(E, -1, 1)).reshape(r.shape)
