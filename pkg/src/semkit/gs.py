"""
Matrix-free direct stiffness summation w_L = Q Q^T u_L.

Global ids touched by this rank are split three ways:

* shared: some other rank also references the id; reduced through the
  transport;
* local non-injective: three or more local slots, stored as variable
  length blocks separated by ``-1`` terminators;
* local injective: exactly two local slots, stored as (a, b) tuples sorted
  by ``a``.

:func:`gs_apply` posts receives, gathers and sends the shared partial
values, then reduces the purely local ids while messages are in flight,
and finally folds in the received buffers and scatters the shared ids.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .comm import CommError, SerialComm
from .cost import record

__all__ = ["GsHandle", "gs_setup", "gs_apply", "gs_multiplicity", "OPS"]

OPS = {"add": 0, "mul": 1, "min": 2, "max": 3}
_UFUNC = {"add": np.add, "mul": np.multiply, "min": np.minimum, "max": np.maximum}


@dataclass(frozen=True)
class GsHandle:
    rank: int
    n_slots: int
    blocks: np.ndarray  # flat slot list, -1 terminated groups
    nonin_slots: np.ndarray
    nonin_offsets: np.ndarray
    nonin_counts: np.ndarray
    pairs: np.ndarray  # (k, 2) injective tuples sorted by first slot
    shared_gids: np.ndarray
    shared_slots: np.ndarray
    shared_offsets: np.ndarray
    shared_counts: np.ndarray
    neighbors: tuple
    neighbor_index: dict = field(repr=False)  # rank -> indices into shared_gids
    n_unique: int = 0
    comm: object = field(default=None, repr=False, compare=False)
    deterministic: bool = True
    tag: int = 0


def _csr(groups_sorted_slots, group_ids):
    """Offsets/counts of consecutive runs in `group_ids` (already sorted)."""
    if len(group_ids) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    starts = np.flatnonzero(np.r_[True, group_ids[1:] != group_ids[:-1]])
    counts = np.diff(np.r_[starts, len(group_ids)])
    return starts.astype(np.int64), counts.astype(np.int64)


def gs_setup(dofmap, partition=None, rank=0, comm=None, deterministic=True) -> GsHandle:
    """Build the gather-scatter plan of `rank` from the global dof map."""
    E = dofmap.gid.shape[0]
    if partition is None:
        partition = np.zeros(E, dtype=np.int64)
    partition = np.asarray(partition)
    nranks = int(partition.max()) + 1
    if not 0 <= rank < nranks:
        raise ValueError(f"rank {rank} outside 0..{nranks - 1}")
    comm = comm if comm is not None else SerialComm()

    per = dofmap.gid[0].size
    gid_all = dofmap.gid.reshape(E, per)
    owner = np.repeat(partition, per)
    pairs_gr = np.unique(np.stack([gid_all.ravel(), owner]), axis=1)
    nranks_touch = np.bincount(pairs_gr[0], minlength=dofmap.n_glob)

    mine = np.flatnonzero(partition == rank)
    lgid = gid_all[mine].ravel()
    n_slots = lgid.size
    order = np.argsort(lgid, kind="stable")
    sg = lgid[order]
    starts, counts = _csr(order, sg)
    ids = sg[starts]
    n_unique = len(ids)
    is_shared = nranks_touch[ids] > 1

    # shared ids
    sh_sel = np.flatnonzero(is_shared)
    sh_gids = ids[sh_sel]
    sh_slots = np.concatenate([order[starts[g] : starts[g] + counts[g]] for g in sh_sel]) if len(sh_sel) else np.zeros(0, np.int64)
    sh_counts = counts[sh_sel]
    sh_offsets = np.r_[0, np.cumsum(sh_counts)[:-1]].astype(np.int64) if len(sh_sel) else np.zeros(0, np.int64)

    # purely local
    nonin_sel = np.flatnonzero(~is_shared & (counts >= 3))
    inj_sel = np.flatnonzero(~is_shared & (counts == 2))
    nonin_groups = [order[starts[g] : starts[g] + counts[g]] for g in nonin_sel]
    nonin_slots = np.concatenate(nonin_groups) if nonin_groups else np.zeros(0, np.int64)
    nonin_counts = counts[nonin_sel].astype(np.int64)
    nonin_offsets = np.r_[0, np.cumsum(nonin_counts)[:-1]].astype(np.int64) if len(nonin_sel) else np.zeros(0, np.int64)
    blocks = np.concatenate([np.r_[g, -1] for g in nonin_groups]).astype(np.int64) if nonin_groups else np.zeros(0, np.int64)

    inj = np.stack([order[starts[inj_sel]], order[starts[inj_sel] + 1]], axis=1) if len(inj_sel) else np.zeros((0, 2), np.int64)
    inj = np.sort(inj, axis=1)
    inj = inj[np.argsort(inj[:, 0], kind="stable")].astype(np.int64)

    # neighbours: other ranks touching any of our shared ids
    neighbor_index = {}
    if len(sh_gids):
        touch = pairs_gr[:, np.isin(pairs_gr[0], sh_gids)]
        for q in np.unique(touch[1]):
            if q == rank:
                continue
            g_q = touch[0, touch[1] == q]
            neighbor_index[int(q)] = np.searchsorted(sh_gids, np.sort(g_q)).astype(np.int64)
    neighbors = tuple(sorted(neighbor_index))

    return GsHandle(
        rank=rank,
        n_slots=n_slots,
        blocks=blocks,
        nonin_slots=nonin_slots.astype(np.int64),
        nonin_offsets=nonin_offsets,
        nonin_counts=nonin_counts,
        pairs=inj,
        shared_gids=sh_gids.astype(np.int64),
        shared_slots=sh_slots.astype(np.int64),
        shared_offsets=sh_offsets,
        shared_counts=sh_counts.astype(np.int64),
        neighbors=neighbors,
        neighbor_index=neighbor_index,
        n_unique=n_unique,
        comm=comm,
        deterministic=deterministic,
        tag=comm.next_tag(),
    )


# -- local kernels -------------------------------------------------------------


@_accel.njit
def _reduce2(a, b, op):
    if op == 0:
        return a + b
    if op == 1:
        return a * b
    if op == 2:
        return min(a, b)
    return max(a, b)


@_accel.njit
def _gs_local_nb(u, out, blocks, pairs, op):
    i = 0
    nb = blocks.shape[0]
    while i < nb:
        start = i
        acc = u[blocks[i]]
        i += 1
        while blocks[i] >= 0:
            acc = _reduce2(acc, u[blocks[i]], op)
            i += 1
        for m in range(start, i):
            out[blocks[m]] = acc
        i += 1  # terminator
    for p in range(pairs.shape[0]):
        a = pairs[p, 0]
        b = pairs[p, 1]
        v = _reduce2(u[a], u[b], op)
        out[a] = v
        out[b] = v


@_accel.njit
def _gather_nb(u, slots, offsets, counts, op):
    v = np.empty(offsets.shape[0])
    for g in range(offsets.shape[0]):
        o = offsets[g]
        acc = u[slots[o]]
        for m in range(o + 1, o + counts[g]):
            acc = _reduce2(acc, u[slots[m]], op)
        v[g] = acc
    return v


def _gs_local_np(u, out, h, ufunc):
    if len(h.nonin_slots):
        vals = ufunc.reduceat(u[h.nonin_slots], h.nonin_offsets)
        out[h.nonin_slots] = np.repeat(vals, h.nonin_counts)
    if len(h.pairs):
        a, b = h.pairs[:, 0], h.pairs[:, 1]
        v = ufunc(u[a], u[b])
        out[a] = v
        out[b] = v


def _gather_shared(u, h, ufunc, use_nb):
    if use_nb:
        return _gather_nb(u, h.shared_slots, h.shared_offsets, h.shared_counts, _op_code(ufunc))
    return ufunc.reduceat(u[h.shared_slots], h.shared_offsets)


def _op_code(ufunc):
    return {np.add: 0, np.multiply: 1, np.minimum: 2, np.maximum: 3}[ufunc]


def gs_apply(h: GsHandle, field, op="add"):
    """
    Return a copy of `field` where every slot holds the `op`-reduction over
    all slots (on all ranks) sharing its global id.
    """
    if op not in _UFUNC:
        raise ValueError(f"unknown gather-scatter op {op!r}")
    ufunc = _UFUNC[op]
    arr = np.asarray(field)
    if arr.size != h.n_slots:
        raise ValueError(f"field has {arr.size} slots, handle expects {h.n_slots}")
    if arr.ndim == 4:
        E, N = arr.shape[0], arr.shape[1] - 1
        record("gs_op", E, N, n_unique=h.n_unique)
    comm = h.comm
    if comm is not None:
        comm.n_gs += 1
    u = arr.reshape(-1)
    out = u.copy()
    use_nb = _accel.USE_NUMBA and u.dtype == np.float64
    shared = len(h.shared_gids) > 0 and comm is not None and comm.size > 1

    if shared:
        tr = comm.transport
        reqs = {q: tr.irecv(h.rank, q, h.tag) for q in h.neighbors}
        v = _gather_shared(u, h, ufunc, use_nb)
        for q in h.neighbors:
            tr.isend(h.rank, q, h.tag, v[h.neighbor_index[q]])

    if use_nb:
        _gs_local_nb(u, out, h.blocks, h.pairs, OPS[op])
    else:
        _gs_local_np(u, out, h, ufunc)

    if shared:
        pending = set(h.neighbors)
        received = {}
        if not h.deterministic:
            acc = v.copy()
        while pending:
            progressed = False
            for q in sorted(pending):
                if reqs[q].test():
                    buf = reqs[q].data
                    if len(buf) != len(h.neighbor_index[q]):
                        raise CommError(f"rank {h.rank}: bad buffer size from rank {q}")
                    if h.deterministic:
                        received[q] = buf
                    else:
                        idx = h.neighbor_index[q]
                        acc[idx] = ufunc(acc[idx], buf)
                    pending.discard(q)
                    progressed = True
            if pending and not progressed:
                time.sleep(0)
        if h.deterministic:
            acc = np.empty_like(v)
            started = np.zeros(len(v), dtype=bool)
            for q in sorted(set(h.neighbors) | {h.rank}):
                if q == h.rank:
                    idx, vals = np.arange(len(v)), v
                else:
                    idx, vals = h.neighbor_index[q], received[q]
                first = ~started[idx]
                acc[idx[first]] = vals[first]
                rest = idx[~first]
                acc[rest] = ufunc(acc[rest], vals[~first])
                started[idx] = True
        out[h.shared_slots] = np.repeat(acc, h.shared_counts)
    return out.reshape(arr.shape)


def gs_multiplicity(h: GsHandle, shape=None):
    ones = np.ones(h.n_slots if shape is None else shape)
    return gs_apply(h, ones, "add")
