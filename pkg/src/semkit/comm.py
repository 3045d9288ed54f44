"""
In-process message passing: a non-blocking point-to-point transport and
a communicator with deterministic allreduce, used by partition workers
running as threads.
"""
import threading
from abc import ABC, abstractmethod
from collections import defaultdict, deque

import numpy as np

__all__ = [
    "CommError",
    "Request",
    "Transport",
    "InMemoryTransport",
    "ShuffledTransport",
    "Comm",
    "SerialComm",
    "run_spmd",
]


class CommError(RuntimeError):
    """Transport failure or aborted partition group."""


class Request:
    """Handle of a posted receive."""

    def __init__(self, transport, src, dst, tag):
        self.transport = transport
        self.src, self.dst, self.tag = src, dst, tag
        self.data = None
        self.done = False

    def test(self) -> bool:
        if not self.done:
            self.transport.test(self)
        return self.done


class Transport(ABC):
    """Non-blocking point-to-point contract.

    Messages between a fixed ordered (src, dst) pair with the same tag
    arrive in posting order.
    """

    @abstractmethod
    def isend(self, src: int, dst: int, tag, data) -> None: ...

    @abstractmethod
    def irecv(self, dst: int, src: int, tag) -> Request: ...

    @abstractmethod
    def test(self, request: Request) -> bool: ...


class InMemoryTransport(Transport):
    def __init__(self):
        self._lock = threading.Lock()
        self._queues = defaultdict(deque)
        self.aborted = False

    def isend(self, src, dst, tag, data):
        if self.aborted:
            raise CommError("transport aborted")
        payload = np.array(data, copy=True)
        with self._lock:
            self._queues[(src, dst, tag)].append(payload)

    def irecv(self, dst, src, tag):
        if self.aborted:
            raise CommError("transport aborted")
        return Request(self, src, dst, tag)

    def test(self, request):
        if self.aborted:
            raise CommError("transport aborted")
        with self._lock:
            q = self._queues.get((request.src, request.dst, request.tag))
            if q:
                request.data = q.popleft()
                request.done = True
        return request.done


class ShuffledTransport(InMemoryTransport):
    """Adversarial transport: each receive reports completion only after a
    random number of extra polls, permuting the completion order."""

    def __init__(self, seed=0, max_delay=5):
        super().__init__()
        self._rng = np.random.default_rng(seed)
        self._rng_lock = threading.Lock()
        self.max_delay = max_delay

    def irecv(self, dst, src, tag):
        req = super().irecv(dst, src, tag)
        with self._rng_lock:
            req.delay = int(self._rng.integers(0, self.max_delay + 1))
        return req

    def test(self, request):
        if getattr(request, "delay", 0) > 0:
            request.delay -= 1
            return False
        return super().test(request)


_REDUCERS = {
    "sum": np.add,
    "max": np.maximum,
    "min": np.minimum,
}


class Comm:
    """Per-rank view of a partition group."""

    def __init__(self, rank, size, transport=None, group=None):
        self.rank = rank
        self.size = size
        self.transport = transport
        self._group = group
        self.n_allreduce = 0
        self.n_gs = 0
        self._tag = 0

    def next_tag(self):
        """Collective tag counter; ranks must create handles in the same order."""
        self._tag += 1
        return self._tag

    def allreduce(self, value, op="sum"):
        """Reduce over ranks in rank order; identical result on every rank."""
        self.n_allreduce += 1
        arr = np.asarray(value, dtype=np.float64)
        if self.size == 1:
            return arr.copy() if arr.ndim else float(arr)
        out = self._group.reduce(self.rank, arr, _REDUCERS[op])
        return out if out.ndim else float(out)

    def barrier(self):
        if self.size > 1:
            self._group.wait()


class SerialComm(Comm):
    def __init__(self):
        super().__init__(0, 1)


class _Group:
    def __init__(self, size, timeout):
        self.size = size
        self._barrier = threading.Barrier(size, timeout=timeout)
        self._slots = [None] * size

    def wait(self):
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise CommError("partition group aborted") from None

    def reduce(self, rank, arr, ufunc):
        self._slots[rank] = arr
        self.wait()
        out = self._slots[0].copy()
        for q in range(1, self.size):
            out = ufunc(out, self._slots[q])
        self.wait()
        return out

    def abort(self):
        self._barrier.abort()


def run_spmd(size, fn, transport=None, timeout=600.0):
    """
    Run ``fn(comm)`` on `size` worker threads and return the per-rank
    results in rank order. The first worker exception is re-raised after
    the group is torn down.
    """
    if size == 1:
        return [fn(SerialComm())]
    transport = transport or InMemoryTransport()
    group = _Group(size, timeout)
    results = [None] * size
    errors = [None] * size

    def worker(rank):
        try:
            results[rank] = fn(Comm(rank, size, transport, group))
        except BaseException as exc:  # noqa: BLE001 - propagated below
            errors[rank] = exc
            transport.aborted = True
            group.abort()

    threads = [threading.Thread(target=worker, args=(r,), daemon=True) for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    primary = [e for e in errors if e is not None and not isinstance(e, CommError)]
    if primary:
        raise primary[0]
    for e in errors:
        if e is not None:
            raise e
    return results
