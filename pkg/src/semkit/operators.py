"""
Matrix-free SEM operators and the per-rank discretization context.

Assembled operators return w = QQ^T A_L u: the element-local action
followed by one gather-scatter add. Pointwise operators (derivatives,
curl, advection, divergence) work element by element; the vector-valued
ones average shared dofs so the result is continuous again.
"""
import numpy as np

from . import kernels as K
from .basis import Space
from .comm import SerialComm
from .gs import gs_apply, gs_multiplicity, gs_setup
from .mesh import (
    FACE_CORNERS,
    assign_global_numbering,
    compute_geometric_factors,
    partition_mesh,
)

__all__ = [
    "Discretization",
    "apply_poisson",
    "apply_helmholtz",
    "apply_mass",
    "apply_dx",
    "apply_grad",
    "apply_curl",
    "apply_advection",
    "apply_divergence",
    "helmholtz_diagonal",
    "boundary_slots",
]

_AXES = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


def _axis(axis):
    try:
        return _AXES[axis]
    except KeyError:
        raise ValueError(f"axis must be one of x, y, z (got {axis!r})") from None


def _check(u, coef):
    shape = (coef.E,) + (coef.space.n,) * 3
    if np.shape(u) != shape:
        raise ValueError(f"field shape {np.shape(u)} does not match {shape}")


def _average(u, gs, minv):
    w = gs_apply(gs, u, "add")
    if minv is None:
        minv = 1.0 / gs_multiplicity(gs, w.shape)
    return K.col2(w, minv)


# -- assembled operators ---------------------------------------------------


def apply_poisson(u, coef, gs):
    """Assembled stiffness action QQ^T D^T G D u (no masking)."""
    _check(u, coef)
    w = K.ax_poisson(u, coef.G, coef.space.D)
    return gs_apply(gs, w, "add")


def apply_helmholtz(u, coef, h1, h2, gs):
    """Assembled h1 * stiffness + h2 * mass action."""
    _check(u, coef)
    w = K.ax_helmholtz(u, coef.G, coef.space.D, coef.B, h1, h2)
    return gs_apply(gs, w, "add")


def apply_mass(u, coef, gs):
    _check(u, coef)
    return gs_apply(gs, K.col3(coef.B, u), "add")


def helmholtz_diagonal(coef, h1, h2, gs=None):
    """
    Diagonal of the element Helmholtz operators, gather-scatter added when
    `gs` is given. Includes the G cross terms, which only touch element
    boundary nodes (D_ii vanishes at interior GLL nodes).
    """
    D, G = coef.space.D, coef.G
    D2 = D * D
    d = np.einsum("mi,emjk->eijk", D2, G[0])
    d += np.einsum("mj,eimk->eijk", D2, G[1])
    d += np.einsum("mk,eijm->eijk", D2, G[2])
    dd = np.diag(D)
    d += 2.0 * dd[:, None, None] * dd[None, :, None] * G[3]
    d += 2.0 * dd[:, None, None] * dd[None, None, :] * G[4]
    d += 2.0 * dd[None, :, None] * dd[None, None, :] * G[5]
    d = h1 * d + h2 * coef.B
    if gs is not None:
        d = gs_apply(gs, d, "add")
    return d


# -- pointwise operators ----------------------------------------------------


def apply_dx(u, coef, axis):
    """Pointwise d u / d axis at the GLL points (element-local)."""
    _check(u, coef)
    return K.dudxyz(u, coef.dxidx, coef.space.D, _axis(axis))


def apply_grad(u, coef):
    _check(u, coef)
    return K.opgrad(u, coef.dxidx, coef.space.D)


def apply_curl(u, v, w, coef, gs, minv=None):
    """Vorticity with shared dofs averaged."""
    for f in (u, v, w):
        _check(f, coef)
    D, J = coef.space.D, coef.dxidx
    wx = K.sub3(K.dudxyz(w, J, D, 1), K.dudxyz(v, J, D, 2))
    wy = K.sub3(K.dudxyz(u, J, D, 2), K.dudxyz(w, J, D, 0))
    wz = K.sub3(K.dudxyz(v, J, D, 0), K.dudxyz(u, J, D, 1))
    return tuple(_average(f, gs, minv) for f in (wx, wy, wz))


def apply_advection(u, v, w, coef, gs, minv=None):
    """Convective term (u . grad) u on the GLL grid, no dealiasing."""
    for f in (u, v, w):
        _check(f, coef)
    D, J = coef.space.D, coef.dxidx
    return tuple(_average(K.convect(f, u, v, w, J, D), gs, minv) for f in (u, v, w))


def apply_divergence(u, v, w, coef, gs, minv=None):
    for f in (u, v, w):
        _check(f, coef)
    D, J = coef.space.D, coef.dxidx
    div = K.add3(K.dudxyz(u, J, D, 0), K.dudxyz(v, J, D, 1))
    div = K.add2(div, K.dudxyz(w, J, D, 2))
    return _average(div, gs, minv)


# -- discretization context -------------------------------------------------


def boundary_slots(mesh, dofmap):
    """Boolean (E, n, n, n) array marking slots on non-periodic boundary faces."""
    # faces are matched by their centroid on the torus; corner classes alone
    # cannot tell apart the two faces spanning a period of two elements
    X = mesh.vertices[mesh.hexes]
    span = np.ptp(mesh.vertices, axis=0).max()
    keys = {}
    for f, corners in enumerate(FACE_CORNERS):
        cen = X[:, list(corners)].mean(axis=1)
        for ax, L in enumerate(mesh.periods):
            if L is not None:
                lo = mesh.extents[ax][0]
                w = np.mod(cen[:, ax] - lo, L)
                w[np.abs(w - L) < 1e-9 * L] = 0.0
                cen[:, ax] = w
        key = np.round(cen / span * 1e8).astype(np.int64)
        for e in range(mesh.E):
            keys.setdefault(tuple(key[e]), []).append((e, f))
    n = dofmap.gid.shape[1]
    bnd_gids = []
    for faces in keys.values():
        if len(faces) > 1:
            continue
        e, f = faces[0]
        ax, side = divmod(f, 2)
        idx = [slice(None)] * 3
        idx[ax] = n - 1 if side else 0
        bnd_gids.append(dofmap.gid[(e,) + tuple(idx)].ravel())
    on = np.zeros(dofmap.n_glob, dtype=bool)
    if bnd_gids:
        on[np.concatenate(bnd_gids)] = True
    return on[dofmap.gid]


class Discretization:
    """
    Everything one rank needs to apply operators: space, owned-element
    geometry, gather-scatter plan, inverse multiplicity, Dirichlet mask and
    the global weighted inner product.

    Parameters
    ----------
    mesh : Mesh
    N : int
        Polynomial order.
    comm : Comm, optional
        Defaults to a serial communicator.
    partition : array, optional
        Element-to-rank map; defaults to the lexicographic block split.
    deterministic : bool
        Gather-scatter accumulation mode.
    """

    def __init__(self, mesh, N, comm=None, partition=None, deterministic=True, dofmap=None, coef=None):
        self.mesh = mesh
        self.space = Space.of_order(N)
        self.comm = comm if comm is not None else SerialComm()
        if partition is None:
            partition = partition_mesh(mesh, self.comm.size)
        self.partition = np.asarray(partition)
        self.dofmap = dofmap if dofmap is not None else assign_global_numbering(mesh, self.space)
        self.elements = np.flatnonzero(self.partition == self.comm.rank)
        full = coef if coef is not None else compute_geometric_factors(mesh, self.space)
        self.coef = full.subset(self.elements)
        self.gs = gs_setup(self.dofmap, self.partition, self.comm.rank, self.comm, deterministic)
        self.shape = (len(self.elements),) + (self.space.n,) * 3
        self.mult = gs_multiplicity(self.gs, self.shape)
        self.minv = 1.0 / self.mult
        bnd = boundary_slots(mesh, self.dofmap)[self.elements]
        self.mask = np.where(bnd, 0.0, 1.0)
        self.has_boundary = bool(self.comm.allreduce(float(bnd.any()), "max"))
        self.volume = self.comm.allreduce(float(self.coef.B.sum()))

    @property
    def N(self):
        return self.space.N

    @property
    def E(self):
        return self.shape[0]

    def zeros(self):
        return np.zeros(self.shape)

    def field(self, fn, t=0.0):
        """Evaluate ``fn(x, y, z[, t])`` at the owned GLL points."""
        c = self.coef
        try:
            val = fn(c.x, c.y, c.z, t)
        except TypeError:
            val = fn(c.x, c.y, c.z)
        return np.broadcast_to(np.asarray(val, dtype=np.float64), self.shape).copy()

    def gs_add(self, u):
        return gs_apply(self.gs, u, "add")

    def average(self, u):
        return _average(u, self.gs, self.minv)

    def dot(self, a, b):
        """Global inner product counting every global dof once."""
        return self.comm.allreduce(K.glsc3(a, b, self.minv))

    def dots(self, pairs):
        """Several inner products folded into a single allreduce."""
        local = np.array([K.glsc3(a, b, self.minv) for a, b in pairs])
        return self.comm.allreduce(local)

    def norm(self, a):
        return float(np.sqrt(max(self.dot(a, a), 0.0)))

    def mean(self, u):
        """B-weighted mean of a continuous field."""
        return self.comm.allreduce(K.glsc2(self.coef.B, u)) / self.volume

    def integral(self, u):
        return self.comm.allreduce(K.glsc2(self.coef.B, u))

    # operators bound to this context
    def poisson(self, u):
        return apply_poisson(u, self.coef, self.gs)

    def helmholtz(self, u, h1, h2):
        return apply_helmholtz(u, self.coef, h1, h2, self.gs)

    def mass(self, u):
        return apply_mass(u, self.coef, self.gs)

    def dx(self, u, axis):
        return apply_dx(u, self.coef, axis)

    def curl(self, u, v, w):
        return apply_curl(u, v, w, self.coef, self.gs, self.minv)

    def advection(self, u, v, w):
        return apply_advection(u, v, w, self.coef, self.gs, self.minv)

    def divergence(self, u, v, w):
        return apply_divergence(u, v, w, self.coef, self.gs, self.minv)
