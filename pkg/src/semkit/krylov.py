"""
Krylov solvers, successive-RHS projection and preconditioners.

Solvers work on any array shape; inner products come from a ``dot`` /
``dots`` provider so that element-lattice fields use the
multiplicity-weighted global inner product while plain vectors (tests,
dense oracles) use the Euclidean one. Vector updates go through
:mod:`semkit.kernels` so that costs land in the active ledger.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import kernels as K
from .basis import Space, interpolation_matrix
from .comm import SerialComm

__all__ = [
    "SolverSettings",
    "SolveResult",
    "ConvergenceError",
    "BreakdownError",
    "PreconditionerError",
    "DefinitenessError",
    "EuclideanDot",
    "solve_cg",
    "solve_gmres",
    "ProjectionSpace",
    "project_rhs",
    "update_projection_space",
    "precon_jacobi",
    "JacobiPreconditioner",
    "SchwarzPreconditioner",
    "precon_schwarz",
]


class ConvergenceError(RuntimeError):
    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


class BreakdownError(ArithmeticError):
    """Non-positive curvature p^T A p in CG."""


class PreconditionerError(RuntimeError):
    pass


class DefinitenessError(ValueError):
    pass


@dataclass
class SolverSettings:
    tol: float = 1e-7
    max_iter: int = 500
    restart: int = 30
    projection_dim: int = 20
    coarse_iter: int = 10

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.restart < 1 or self.coarse_iter < 1:
            raise ValueError("solver settings must be positive")
        if self.projection_dim < 0:
            raise ValueError("projection dimension must be >= 0")


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    stagnated: bool = False
    history: list = field(default_factory=list, repr=False)

    def __iter__(self):
        # allows ``x, its, res = solve_cg(...)``
        return iter((self.x, self.iterations, self.residual))


class EuclideanDot:
    """Plain inner product for flat vectors (single rank)."""

    def __init__(self):
        self.comm = SerialComm()

    def dot(self, a, b):
        self.comm.allreduce(0.0)
        return float(np.vdot(a, b))

    def dots(self, pairs):
        self.comm.allreduce(0.0)
        return np.array([float(np.vdot(a, b)) for a, b in pairs])


def _ident(r):
    return r.copy()


def _masked(mask):
    if mask is None:
        return lambda v: v
    return lambda v: K.col2(v, mask)


def _ip(ip):
    return ip if ip is not None else EuclideanDot()


def solve_cg(apply_A, b, x0=None, precon=None, settings=None, mask=None, ip=None, raise_on_fail=False):
    """
    Preconditioned conjugate gradients.

    Two global reductions per iteration: p^T A p, and the fused
    (r^T r, r^T z) pair. Stops when ``sqrt(r^T r) <= settings.tol``.

    Returns
    -------
    SolveResult
    """
    settings = settings or SolverSettings()
    ip = _ip(ip)
    M = precon or _ident
    msk = _masked(mask)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64, copy=True)

    r = K.sub3(b, apply_A(x))
    r = msk(r)
    z = msk(M(r))
    rr, rz = ip.dots([(r, r), (r, z)])
    res = float(np.sqrt(max(rr, 0.0)))
    hist = [res]
    it = 0
    p, rz_old = None, 1.0
    while res > settings.tol and it < settings.max_iter:
        if p is None:
            p = K.copy(z)
        else:
            p = K.add2s1(p, z, rz / rz_old)
        w = msk(apply_A(p))
        pap = ip.dot(p, w)
        if not pap > 0.0:
            raise BreakdownError(f"non-positive curvature p^T A p = {pap:g} at iteration {it}")
        alpha = rz / pap
        x = K.axpy(x, alpha, p)
        r = K.axpy(r, -alpha, w)
        z = msk(M(r))
        rz_old = rz
        rr, rz = ip.dots([(r, r), (r, z)])
        res = float(np.sqrt(max(rr, 0.0)))
        hist.append(res)
        it += 1
    out = SolveResult(x, it, res, res <= settings.tol, history=hist)
    if raise_on_fail and not out.converged:
        raise ConvergenceError(f"CG did not converge: residual {res:.3e} after {it} iterations", out)
    return out


def solve_gmres(apply_A, b, x0=None, precon=None, settings=None, mask=None, ip=None, raise_on_fail=False):
    """
    Restarted, right-preconditioned flexible GMRES with classical
    Gram-Schmidt applied twice (three reductions per iteration).

    A zero subdiagonal Hessenberg entry is a lucky breakdown: the current
    iterate is exact. If three consecutive restart cycles fail to reduce the
    residual by at least 1%, the solve stops with ``stagnated=True``.
    """
    settings = settings or SolverSettings()
    ip = _ip(ip)
    M = precon or _ident
    msk = _masked(mask)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64, copy=True)
    m = settings.restart

    r = msk(K.sub3(b, apply_A(x)))
    beta = float(np.sqrt(max(ip.dot(r, r), 0.0)))
    hist = [beta]
    it = 0
    stalls = 0
    stagnated = False
    while beta > settings.tol and it < settings.max_iter:
        cycle_start = beta
        V = [K.cmult2(r, 1.0 / beta)]
        Z = []
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        j = 0
        lucky = False
        while j < m and it < settings.max_iter:
            z = msk(M(V[j]))
            Z.append(z)
            w = msk(apply_A(z))
            h = np.zeros(j + 1)
            for _ in range(2):
                c = ip.dots([(Vi, w) for Vi in V])
                for Vi, ci in zip(V, c):
                    w = K.axpy(w, -ci, Vi)
                h += c
            hn = float(np.sqrt(max(ip.dot(w, w), 0.0)))
            H[: j + 1, j] = h
            H[j + 1, j] = hn
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            den = np.hypot(H[j, j], H[j + 1, j])
            if den == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j], sn[j] = H[j, j] / den, H[j + 1, j] / den
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            it += 1
            j += 1
            res = abs(g[j])
            hist.append(res)
            if res <= settings.tol:
                break
            if hn <= 1e-14 * max(abs(h).max(initial=0.0), 1.0):
                lucky = True
                break
            V.append(K.cmult2(w, 1.0 / hn))
        y = np.linalg.solve(np.triu(H[:j, :j]), g[:j]) if j else np.zeros(0)
        for zi, yi in zip(Z, y):
            x = K.axpy(x, yi, zi)
        r = msk(K.sub3(b, apply_A(x)))
        beta = float(np.sqrt(max(ip.dot(r, r), 0.0)))
        if lucky:
            break
        if beta > 0.99 * cycle_start:
            stalls += 1
            if stalls >= 3:
                stagnated = True
                break
        else:
            stalls = 0
    out = SolveResult(x, it, beta, beta <= settings.tol, stagnated, hist)
    if raise_on_fail and not out.converged:
        raise ConvergenceError(f"GMRES did not converge: residual {beta:.3e} after {it} iterations", out)
    return out


# -- projection ------------------------------------------------------------


class ProjectionSpace:
    """
    Up to `m` A-orthonormal previous solutions (and their images A z).

    Parameters
    ----------
    m : int
        Maximum number of stored directions; 0 disables projection.
    operator : object
        Identity of the operator the directions were orthonormalized
        against; :func:`project_rhs` refuses a different one.
    """

    def __init__(self, m=20, operator=None):
        self.m = int(m)
        self.operator = operator
        self.Z = []
        self.AZ = []

    def __len__(self):
        return len(self.Z)

    def clear(self):
        self.Z, self.AZ = [], []


def _check_op(ps, apply_A):
    key = getattr(apply_A, "key", apply_A)
    if ps.operator is None:
        ps.operator = key
    elif ps.operator is not key and ps.operator != key:
        raise ValueError("projection space was built for a different operator")


def project_rhs(ps, b, apply_A, ip=None):
    """
    Return (x_partial, b_deflated) with x_partial = sum (z_i^T b) z_i and
    b_deflated = b - A x_partial. Uses the stored A z_i, so no operator
    application is needed.
    """
    ip = _ip(ip)
    _check_op(ps, apply_A)
    xp = np.zeros_like(b)
    if not ps.Z:
        return xp, K.copy(b)
    c = ip.dots([(z, b) for z in ps.Z])
    bd = K.copy(b)
    for z, az, ci in zip(ps.Z, ps.AZ, c):
        xp = K.axpy(xp, ci, z)
        bd = K.axpy(bd, -ci, az)
    return xp, bd


def update_projection_space(ps, x_new, apply_A, ip=None):
    """
    A-orthonormalize `x_new` against the stored directions (classical
    Gram-Schmidt, two passes, coefficients from the stored A z) and append
    it. A z of the new direction is computed after orthogonalization, so
    each stored pair stays consistent even when the new component is tiny.
    A full space is first reset so only the new solution is kept.
    Negligible new components are skipped.
    """
    ip = _ip(ip)
    if ps.m == 0:
        return ps
    _check_op(ps, apply_A)
    if len(ps.Z) >= ps.m:
        ps.clear()
    z = K.copy(x_new)
    known = 0.0
    if ps.Z:
        for _ in range(2):
            c = ip.dots([(azi, z) for azi in ps.AZ])
            for zi, ci in zip(ps.Z, c):
                z = K.axpy(z, -ci, zi)
            known += float(np.dot(c, c))
    az = apply_A(z)
    nrm2 = max(ip.dot(z, az), 0.0)
    nrm = float(np.sqrt(nrm2))
    if nrm == 0.0 or nrm < 1e-10 * np.sqrt(nrm2 + known):
        return ps
    ps.Z.append(K.cmult(z, 1.0 / nrm))
    ps.AZ.append(K.cmult(az, 1.0 / nrm))
    return ps


# -- preconditioners ---------------------------------------------------------


class JacobiPreconditioner:
    """Pointwise inverse of the assembled operator diagonal."""

    def __init__(self, diag, mask=None):
        diag = np.asarray(diag, dtype=np.float64)
        sel = diag if mask is None else diag[mask > 0]
        if sel.size and not np.all(sel > 0):
            raise DefinitenessError("operator diagonal has non-positive entries")
        inv = np.zeros_like(diag)
        good = diag > 0
        inv[good] = 1.0 / diag[good]
        if mask is not None:
            inv *= mask
        self.inv = inv

    def __call__(self, r):
        return K.col3(self.inv, r)


def precon_jacobi(disc, h1, h2, mask=None):
    """Jacobi preconditioner of the Helmholtz operator h1*A + h2*B on `disc`."""
    from .operators import helmholtz_diagonal

    d = helmholtz_diagonal(disc.coef, h1, h2, disc.gs)
    return JacobiPreconditioner(d, mask)


def _element_matrices(coef):
    """Dense local stiffness matrices (E, n^3, n^3) of the element operators."""
    n = coef.space.n
    D = sparse.csr_matrix(coef.space.D)
    I = sparse.identity(n, format="csr")
    # reference derivative along r, s, t as sparse (n^3, n^3) matrices
    Dl = (
        sparse.kron(sparse.kron(D, I), I).tocsr(),
        sparse.kron(sparse.kron(I, D), I).tocsr(),
        sparse.kron(sparse.kron(I, I), D).tocsr(),
    )
    pairs = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
    E = coef.E
    A = np.zeros((E, n**3, n**3))
    for e in range(E):
        acc = None
        for m, (r, s) in enumerate(pairs):
            blk = Dl[r].T @ sparse.diags(coef.G[m, e].ravel()) @ Dl[s]
            if r != s:
                blk = blk + blk.T
            acc = blk if acc is None else acc + blk
        A[e] = acc.toarray()
    return A


class SchwarzPreconditioner:
    """
    Two-level additive Schwarz for the assembled Poisson operator.

    Local level: one subdomain per element, the assembled operator
    restricted to the element's dofs (homogeneous Dirichlet one layer
    outside the element), inverted densely. Coarse level: N=1
    rediscretization on the same mesh, solved approximately by a fixed
    number of Jacobi-preconditioned CG iterations. Shared dofs of the local
    sum are scaled by ``minv**0.5`` on input and output, keeping the action
    symmetric.

    Parameters
    ----------
    disc : Discretization
        Fine level.
    coarse : Discretization
        Order-1 discretization on the same mesh and partition.
    settings : SolverSettings
        ``coarse_iter`` is the fixed coarse CG iteration count.
    mask : array, optional
        Dirichlet mask of the fine level (None for pure Neumann/periodic).
    """

    def __init__(self, disc, coarse, settings=None, mask=None, coarse_mask=None, weighting="sqrt"):
        if coarse.N != 1:
            raise ValueError("coarse level must be of order 1")
        self.disc, self.coarse = disc, coarse
        self.settings = settings or SolverSettings()
        self.mask = mask
        self.coarse_mask = coarse_mask
        self.weighting = weighting
        self.singular = mask is None
        self.J = interpolation_matrix(Space.of_order(1), disc.space)
        self._build_local()
        cd = helmholtz_diagonal_of(coarse)
        self.coarse_jacobi = JacobiPreconditioner(cd, coarse_mask)
        self.n_coarse_solves = 0
        self.coarse_iters_total = 0
        self.coarse_log = []

    def _build_local(self):
        d = self.disc
        n3 = d.space.n ** 3
        Ae = _element_matrices(d.coef)
        gid = d.dofmap.gid[d.elements].reshape(len(d.elements), n3)
        # assembled rows restricted to each element's closure: sum the
        # blocks of every element (on any rank) touching those dofs
        full_coef = d.coef if d.comm.size == 1 else None
        if full_coef is None:
            from .mesh import compute_geometric_factors

            full = compute_geometric_factors(d.mesh, d.space)
            Aall = _element_matrices(full)
            gall = d.dofmap.gid.reshape(d.mesh.E, n3)
        else:
            Aall, gall = Ae, gid
        owners = {}
        for e2, row in enumerate(gall):
            for g in np.unique(row):
                owners.setdefault(int(g), []).append(e2)
        mask = None if self.mask is None else self.mask.reshape(len(d.elements), n3)
        inv = np.empty((len(d.elements), n3, n3))
        cache = {}
        for le, row in enumerate(gid):
            nbrs = sorted({e2 for g in row for e2 in owners[int(g)]})
            blk = np.zeros((n3, n3))
            pos = {int(g): i for i, g in enumerate(row)}
            for e2 in nbrs:
                r2 = gall[e2]
                loc = np.array([pos.get(int(g), -1) for g in r2])
                sel = np.flatnonzero(loc >= 0)
                li = loc[sel]
                np.add.at(blk, (li[:, None], li[None, :]), Aall[e2][np.ix_(sel, sel)])
            # repeated gids inside one element (single-element periodic
            # directions) are already merged by the index map
            uniq = np.zeros(n3, dtype=bool)
            uniq[list(pos.values())] = True
            if mask is not None:
                uniq &= mask[le] > 0
            keep = np.flatnonzero(uniq)
            sub = blk[np.ix_(keep, keep)]
            scale = float(np.abs(sub).max()) or 1.0
            key = ((np.round(sub / scale, 9) + 0.0).tobytes(), keep.tobytes())
            if key not in cache:
                cache[key] = np.linalg.pinv(sub, hermitian=True) if self.singular and len(keep) == d.dofmap.n_glob else np.linalg.inv(sub)
            full = np.zeros((n3, n3))
            full[np.ix_(keep, keep)] = cache[key]
            # slots that alias a kept slot (repeated gid) read/write through it
            alias = np.array([pos[int(g)] for g in row])
            if np.array_equal(alias, np.arange(n3)):
                inv[le] = full
            else:
                P = np.zeros((n3, n3))
                P[np.arange(n3), alias] = 1.0
                inv[le] = P @ full @ P.T
        self.local_inv = inv
        self.n_blocks = len(cache)
        self.w = np.sqrt(d.minv) if self.weighting == "sqrt" else None

    def local(self, r):
        d = self.disc
        if self.weighting == "sqrt":
            r = K.col3(r, self.w)
        u = K.schwarz_local(self.local_inv, r)
        u = d.gs_add(u)
        if self.weighting == "sqrt":
            u = K.col2(u, self.w)
        elif self.weighting == "minv":
            u = K.col2(u, d.minv)
        return u

    def coarse_solve(self, r):
        d, c = self.disc, self.coarse
        rc = K.restrict(K.col3(r, d.minv), self.J)
        rc = c.gs_add(rc)
        if self.coarse_mask is not None:
            rc = K.col2(rc, self.coarse_mask)
        if self.singular:
            rc = _remove_constant(c, rc)
        ec, its = _fixed_cg(c, rc, self.coarse_jacobi, self.settings.coarse_iter, self.coarse_mask)
        self.n_coarse_solves += 1
        self.coarse_iters_total += its
        self.coarse_log.append(its)
        return K.prolong(ec, self.J)

    def __call__(self, r):
        z = self.local(r)
        z = K.add2(z, self.coarse_solve(r))
        if self.mask is not None:
            z = K.col2(z, self.mask)
        return z


def helmholtz_diagonal_of(disc, h1=1.0, h2=0.0):
    from .operators import helmholtz_diagonal

    return helmholtz_diagonal(disc.coef, h1, h2, disc.gs)


def _remove_constant(c, r):
    """Project a residual-space vector onto the range of the singular operator."""
    s = c.dot(r, np.ones_like(r)) / c.dot(np.ones_like(r), np.ones_like(r))
    return K.cadd(r, -s)


def _fixed_cg(c, b, M, iters, mask):
    """A fixed number of Jacobi-PCG iterations from a zero guess."""
    msk = _masked(mask)
    x = np.zeros_like(b)
    r = K.copy(b)
    z = msk(M(r))
    rr, rz = c.dots([(r, r), (r, z)])
    rr0 = rr
    p, rz_old = None, 1.0
    done = 0
    for _ in range(iters):
        # converged to roundoff: further steps would only amplify noise
        if rr <= 1e-20 * rr0 or rz == 0.0:
            break
        p = K.copy(z) if p is None else K.add2s1(p, z, rz / rz_old)
        w = msk(c.poisson(p))
        pap = c.dot(p, w)
        if not pap > 0.0:
            break
        alpha = rz / pap
        x = K.axpy(x, alpha, p)
        r = K.axpy(r, -alpha, w)
        z = msk(M(r))
        rz_old = rz
        rr, rz = c.dots([(r, r), (r, z)])
        done += 1
        if rr > 100.0 * rr0:
            raise PreconditionerError("coarse CG diverged (residual grew more than 10x)")
    return x, done


def precon_schwarz(disc, coarse, settings=None, mask=None, coarse_mask=None, weighting="sqrt"):
    return SchwarzPreconditioner(disc, coarse, settings, mask, coarse_mask, weighting)
