"""
Hexahedral box meshes, global dof numbering, geometric factors and
element partitioning.

Conventions
-----------
* Element corners use the binary ordering ``c = a + 2*b + 4*d`` where
  (a, b, d) are the 0/1 corner offsets along (x, y, z).
* Element lattices are indexed ``[e, i, j, k]`` with i, j, k the GLL node
  indices along the reference directions r, s, t (x, y, z for box meshes).
* Box elements are ordered lexicographically with x fastest.
* Global dof ids are lexicographic in the coordinates of the identified
  point class, sorted by (z, y, x) with x fastest.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .basis import Space

__all__ = [
    "MeshError",
    "GeometryError",
    "Mesh",
    "DofMap",
    "Coef",
    "build_box_mesh",
    "assign_global_numbering",
    "compute_geometric_factors",
    "partition_mesh",
    "element_coordinates",
    "read_mesh",
    "write_mesh",
]

# local corner ids of the six faces, ordered (-x, +x, -y, +y, -z, +z)
FACE_CORNERS = (
    (0, 2, 4, 6),
    (1, 3, 5, 7),
    (0, 1, 4, 5),
    (2, 3, 6, 7),
    (0, 1, 2, 3),
    (4, 5, 6, 7),
)


class MeshError(ValueError):
    """Invalid mesh input or ambiguous dof identification."""


class GeometryError(ValueError):
    """Degenerate element mapping."""


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (K, 3)
    hexes: np.ndarray  # (E, 8)
    periodic: tuple = (False, False, False)
    extents: tuple = ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0))
    periodic_pairs: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 4), dtype=np.int64), repr=False
    )
    vertex_class: np.ndarray = field(default=None, repr=False)
    shape: tuple = None  # (Ex, Ey, Ez) for structured boxes

    @property
    def E(self):
        return len(self.hexes)

    @property
    def n_unique_vertices(self):
        return int(len(np.unique(self.vertex_class)))

    @property
    def periods(self):
        return tuple(
            (hi - lo) if p else None for p, (lo, hi) in zip(self.periodic, self.extents)
        )

    @property
    def fully_periodic(self):
        return all(self.periodic)

    @property
    def volume(self):
        return float(np.prod([hi - lo for lo, hi in self.extents]))


@dataclass(frozen=True)
class DofMap:
    """Local-slot to global-id map (the action of Q) plus multiplicities."""

    gid: np.ndarray  # (E, n, n, n) int64
    n_glob: int
    multiplicity: np.ndarray  # (n_glob,)
    coords: np.ndarray = field(repr=False, default=None)  # (n_glob, 3) class representatives

    @property
    def n_local(self):
        return self.gid.size


def _check_extents(extents):
    ext = []
    for lo, hi in extents:
        lo, hi = float(lo), float(hi)
        if not hi > lo:
            raise MeshError(f"degenerate extent ({lo}, {hi})")
        ext.append((lo, hi))
    return tuple(ext)


def build_box_mesh(Ex, Ey, Ez, extents=((0, 1), (0, 1), (0, 1)), periodic=(False,) * 3):
    """Axis-aligned structured box of Ex*Ey*Ez hexahedra."""
    counts = (int(Ex), int(Ey), int(Ez))
    if min(counts) < 1:
        raise MeshError(f"element counts must be >= 1, got {counts}")
    extents = _check_extents(extents)
    periodic = tuple(bool(p) for p in periodic)
    nv = [c + 1 for c in counts]
    axes = [np.linspace(lo, hi, c + 1) for (lo, hi), c in zip(extents, counts)]
    # vertex (a, b, d) -> id a + nv0*(b + nv1*d), x fastest
    vz, vy, vx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    vertices = np.stack([vx.ravel(), vy.ravel(), vz.ravel()], axis=1)

    ez, ey, ex = np.meshgrid(
        np.arange(counts[2]), np.arange(counts[1]), np.arange(counts[0]), indexing="ij"
    )
    ex, ey, ez = ex.ravel(), ey.ravel(), ez.ravel()
    hexes = np.empty((ex.size, 8), dtype=np.int64)
    for c in range(8):
        a, b, d = c & 1, (c >> 1) & 1, (c >> 2) & 1
        hexes[:, c] = (ex + a) + nv[0] * ((ey + b) + nv[1] * (ez + d))

    idx = np.stack(np.unravel_index(np.arange(len(vertices)), nv[::-1])[::-1], axis=1)
    for ax in range(3):
        if periodic[ax]:
            idx[:, ax] %= counts[ax]
    key = idx[:, 0] + nv[0] * (idx[:, 1] + nv[1] * idx[:, 2])
    _, vclass = np.unique(key, return_inverse=True)

    pairs = []
    for ax in range(3):
        if not periodic[ax]:
            continue
        lo_face, hi_face = 2 * ax, 2 * ax + 1
        sel = [ex, ey, ez]
        first = np.nonzero(sel[ax] == 0)[0]
        last = np.nonzero(sel[ax] == counts[ax] - 1)[0]
        for e0, e1 in zip(first, last):
            pairs.append((e0, lo_face, e1, hi_face))
    return Mesh(
        vertices=vertices,
        hexes=hexes,
        periodic=periodic,
        extents=extents,
        periodic_pairs=np.array(pairs, dtype=np.int64).reshape(-1, 4),
        vertex_class=vclass.astype(np.int64),
        shape=counts,
    )


def element_coordinates(mesh: Mesh, space: Space):
    """Physical GLL point coordinates via the trilinear map, each (E, n, n, n)."""
    xi = space.nodes
    lo, hi = 0.5 * (1.0 - xi), 0.5 * (1.0 + xi)
    shape1 = (lo, hi)
    corners = mesh.vertices[mesh.hexes]  # (E, 8, 3)
    out = np.zeros((3, mesh.E, space.n, space.n, space.n))
    for c in range(8):
        a, b, d = c & 1, (c >> 1) & 1, (c >> 2) & 1
        w = np.einsum("i,j,k->ijk", shape1[a], shape1[b], shape1[d])
        out += corners[:, c, :].T[:, :, None, None, None] * w[None, None]
    return out[0], out[1], out[2]


def _element_diameters(mesh):
    corners = mesh.vertices[mesh.hexes]
    return np.linalg.norm(corners[:, 7] - corners[:, 0], axis=1)


def assign_global_numbering(mesh: Mesh, space: Space) -> DofMap:
    """Identify coincident GLL points (with periodic wrap) and number them."""
    x, y, z = element_coordinates(mesh, space)
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    diam = _element_diameters(mesh)
    tol = 1e-10 * float(diam.min())
    for ax, L in enumerate(mesh.periods):
        if L is None:
            continue
        lo = mesh.extents[ax][0]
        wrapped = lo + np.mod(pts[:, ax] - lo, L)
        wrapped[np.abs(wrapped - (lo + L)) <= tol] = lo
        pts[:, ax] = wrapped

    tree = cKDTree(pts)
    pairs = tree.query_pairs(r=tol, output_type="ndarray")
    npts = len(pts)
    if len(pairs):
        graph = coo_matrix(
            (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(npts, npts)
        )
        ncls, labels = connected_components(graph, directed=False)
    else:
        ncls, labels = npts, np.arange(npts)

    counts = np.bincount(labels, minlength=ncls)
    rep = np.zeros((ncls, 3))
    np.add.at(rep, labels, pts)
    rep /= counts[:, None]
    spread = np.abs(pts - rep[labels]).max(axis=1)
    if np.any(spread > tol):
        raise MeshError("ambiguous dof identification: distinct points within tolerance")

    q = np.round(rep / (1e3 * tol)).astype(np.int64)
    order = np.lexsort((q[:, 0], q[:, 1], q[:, 2]))
    rank = np.empty(ncls, dtype=np.int64)
    rank[order] = np.arange(ncls)
    gid = rank[labels].reshape(mesh.E, space.n, space.n, space.n)
    mult = np.bincount(gid.ravel(), minlength=ncls)
    return DofMap(gid=gid, n_glob=int(ncls), multiplicity=mult, coords=rep[order])


@dataclass(frozen=True)
class Coef:
    """
    Per-point geometric data of a set of elements.

    G holds the unique entries (rr, ss, tt, rs, rt, st) of
    J * w * (grad xi)(grad xi)^T; B = J * w; ``dxidx[r, a]`` is d xi_r / d x_a.
    """

    space: Space
    elements: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    G: np.ndarray  # (6, E, n, n, n)
    B: np.ndarray  # (E, n, n, n)
    jac: np.ndarray  # (E, n, n, n)
    dxidx: np.ndarray  # (3, 3, E, n, n, n)
    spacing: np.ndarray  # (3, E, n, n, n) local GLL spacing per direction

    @property
    def E(self):
        return len(self.elements)

    def subset(self, elements) -> "Coef":
        elements = np.asarray(elements, dtype=np.int64)
        loc = np.searchsorted(self.elements, elements)
        return Coef(
            space=self.space,
            elements=elements,
            x=self.x[loc],
            y=self.y[loc],
            z=self.z[loc],
            G=self.G[:, loc],
            B=self.B[loc],
            jac=self.jac[loc],
            dxidx=self.dxidx[:, :, loc],
            spacing=self.spacing[:, loc],
        )


def _local_derivatives(f, D):
    fr = np.einsum("ai,eijk->eajk", D, f)
    fs = np.einsum("aj,eijk->eiak", D, f)
    ft = np.einsum("ak,eijk->eija", D, f)
    return fr, fs, ft


def compute_geometric_factors(mesh: Mesh, space: Space) -> Coef:
    x, y, z = element_coordinates(mesh, space)
    D = space.D
    # jm[a, r] = d x_a / d xi_r
    jm = np.empty((3, 3) + x.shape)
    for a, f in enumerate((x, y, z)):
        jm[a] = np.stack(_local_derivatives(f, D))
    jmat = np.moveaxis(jm, (0, 1), (-2, -1))  # (..., 3, 3)
    det = np.linalg.det(jmat)
    bad = np.nonzero((det <= 0).reshape(mesh.E, -1).any(axis=1))[0]
    if bad.size:
        raise GeometryError(f"non-positive Jacobian in element {int(bad[0])}")
    inv = np.linalg.inv(jmat)  # inv[..., r, a] = d xi_r / d x_a
    dxidx = np.moveaxis(inv, (-2, -1), (0, 1))
    w = space.weights
    w3 = np.einsum("i,j,k->ijk", w, w, w)
    B = det * w3[None]
    pairs = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
    G = np.empty((6,) + x.shape)
    for m, (r, s) in enumerate(pairs):
        G[m] = B * np.einsum("a...,a...->...", dxidx[r], dxidx[s])

    pts = np.stack([x, y, z])
    spacing = np.empty((3,) + x.shape)
    for d in range(3):
        axis = 2 + d
        step = np.linalg.norm(np.diff(pts, axis=axis), axis=0)
        pad_lo = np.concatenate([np.take(step, [0], axis=axis - 1), step], axis=axis - 1)
        pad_hi = np.concatenate([step, np.take(step, [-1], axis=axis - 1)], axis=axis - 1)
        spacing[d] = np.minimum(pad_lo, pad_hi)
    return Coef(
        space=space,
        elements=np.arange(mesh.E),
        x=x,
        y=y,
        z=z,
        G=G,
        B=B,
        jac=det,
        dxidx=dxidx,
        spacing=spacing,
    )


def partition_mesh(mesh: Mesh, P: int) -> np.ndarray:
    """Lexicographic block split of the element order into P ranks."""
    E = mesh.E
    if not 1 <= P <= E:
        raise MeshError(f"partition count must satisfy 1 <= P <= E={E}, got {P}")
    return (np.arange(E, dtype=np.int64) * P) // E


# ---------------------------------------------------------------------------
# plain-text mesh format


def write_mesh(mesh: Mesh, path):
    lines = ["semmesh 1", f"vertices {len(mesh.vertices)}"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines.append(f"hexes {mesh.E}")
    lines += [" ".join(str(int(i)) for i in h) for h in mesh.hexes]
    if len(mesh.periodic_pairs):
        lines.append(f"periodic {len(mesh.periodic_pairs)}")
        lines += [" ".join(str(int(i)) for i in p) for p in mesh.periodic_pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    """
    Parse a ``semmesh 1`` file. Periodic lines are ``e1 f1 e2 f2``
    (element, local face 0..5 ordered -x,+x,-y,+y,-z,+z); paired faces
    must be related by an axis-aligned translation.
    """
    tokens = Path(path).read_text().split()
    pos = 0

    def take(n=1):
        nonlocal pos
        if pos + n > len(tokens):
            raise MeshError("unexpected end of mesh file")
        out = tokens[pos : pos + n]
        pos += n
        return out

    if take(2) != ["semmesh", "1"]:
        raise MeshError("missing 'semmesh 1' header")
    kw, k = take(2)
    if kw != "vertices":
        raise MeshError("expected 'vertices' section")
    try:
        vertices = np.array(take(3 * int(k)), dtype=np.float64).reshape(-1, 3)
        kw, e = take(2)
        if kw != "hexes":
            raise MeshError("expected 'hexes' section")
        hexes = np.array(take(8 * int(e)), dtype=np.int64).reshape(-1, 8)
        pairs = np.zeros((0, 4), dtype=np.int64)
        if pos < len(tokens):
            kw, m = take(2)
            if kw != "periodic":
                raise MeshError(f"unexpected section {kw!r}")
            pairs = np.array(take(4 * int(m)), dtype=np.int64).reshape(-1, 4)
    except ValueError as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"malformed number in mesh file: {exc}") from None
    if pos != len(tokens):
        raise MeshError("trailing data in mesh file")
    if hexes.size and (hexes.min() < 0 or hexes.max() >= len(vertices)):
        raise MeshError("hex references a vertex out of range")

    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    extents = tuple((float(a), float(b)) for a, b in zip(lo, hi))
    periodic = [False, False, False]
    parent = np.arange(len(vertices))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    scale = float(np.max(hi - lo))
    for e1, f1, e2, f2 in pairs:
        c1 = vertices[hexes[e1, list(FACE_CORNERS[f1])]]
        c2 = vertices[hexes[e2, list(FACE_CORNERS[f2])]]
        shift = c2.mean(axis=0) - c1.mean(axis=0)
        axis = int(np.argmax(np.abs(shift)))
        off = np.delete(shift, axis)
        if np.any(np.abs(off) > 1e-10 * scale):
            raise MeshError("periodic faces must be related by an axis-aligned shift")
        periodic[axis] = True
        for v1 in hexes[e1, list(FACE_CORNERS[f1])]:
            d = np.linalg.norm(vertices[hexes[e2, list(FACE_CORNERS[f2])]] - (vertices[v1] + shift), axis=1)
            j = int(np.argmin(d))
            if d[j] > 1e-10 * scale:
                raise MeshError("periodic face vertices do not match")
            v2 = hexes[e2, list(FACE_CORNERS[f2])][j]
            ra, rb = find(v1), find(v2)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(a) for a in range(len(vertices))])
    _, vclass = np.unique(roots, return_inverse=True)
    return Mesh(
        vertices=vertices,
        hexes=hexes,
        periodic=tuple(periodic),
        extents=extents,
        periodic_pairs=pairs,
        vertex_class=vclass.astype(np.int64),
    )
