"""
Static flop/traffic costs of the field kernels and a hierarchical ledger.

W counts adds + mults + divs, Q counts mandatory 64-bit words loaded and
stored assuming a cold cache between kernels. Costs are expressed for a
kernel acting on E elements of order N (``npts = E * (N+1)**3``) and match
exactly what the numpy implementation in :mod:`semkit.kernels` executes.
"""
import threading
from contextlib import contextmanager
from dataclasses import dataclass

__all__ = [
    "CostTuple",
    "KERNELS",
    "kernel_cost",
    "CostLedger",
    "accumulate_cost",
    "recording",
    "record",
    "active_ledger",
]


@dataclass(frozen=True)
class CostTuple:
    W: int = 0
    Q: int = 0

    def __post_init__(self):
        if self.W < 0 or self.Q < 0:
            raise ValueError("costs are nonnegative")

    def __add__(self, other):
        return CostTuple(self.W + other.W, self.Q + other.Q)

    def __mul__(self, k):
        return CostTuple(self.W * int(k), self.Q * int(k))

    __rmul__ = __mul__


KERNELS = {}


def _register(name):
    def deco(fn):
        KERNELS[name] = fn
        return fn

    return deco


def _vec(w, q):
    def fn(E, N, **_):
        n = E * (N + 1) ** 3
        return CostTuple(w * n, q * n)

    return fn


# pointwise vector kernels: (flops per point, words per point)
_VECTOR = {
    "copy": (0, 2),
    "add2": (1, 3),
    "add3": (1, 3),
    "sub2": (1, 3),
    "sub3": (1, 3),
    "cmult": (1, 2),
    "cmult2": (1, 2),
    "cadd": (1, 2),
    "add2s1": (2, 3),
    "axpy": (2, 3),
    "col2": (1, 3),
    "col3": (1, 3),
    "addcol3": (2, 4),
    "invcol1": (1, 2),
    "glsc2": (2, 2),
    "glsc3": (3, 3),
}
for _name, (_w, _q) in _VECTOR.items():
    KERNELS[_name] = _vec(_w, _q)


def _contraction(E, N):
    """flops of one 1-D derivative contraction over a full element lattice"""
    n1 = N + 1
    return E * n1**3 * (2 * n1 - 1)


@_register("ax_poisson")
def _ax_poisson(E, N, **_):
    n1 = N + 1
    npts = E * n1**3
    return CostTuple(6 * _contraction(E, N) + 17 * npts, 8 * npts + n1 * n1)


@_register("ax_helmholtz")
def _ax_helmholtz(E, N, **_):
    n1 = N + 1
    npts = E * n1**3
    return CostTuple(6 * _contraction(E, N) + 21 * npts, 9 * npts + n1 * n1)


@_register("dudxyz")
def _dudxyz(E, N, **_):
    n1 = N + 1
    npts = E * n1**3
    return CostTuple(3 * _contraction(E, N) + 5 * npts, 5 * npts + n1 * n1)


@_register("opgrad")
def _opgrad(E, N, **_):
    n1 = N + 1
    npts = E * n1**3
    return CostTuple(3 * _contraction(E, N) + 15 * npts, 13 * npts + n1 * n1)


@_register("cdtp")
def _cdtp(E, N, **_):
    n1 = N + 1
    npts = E * n1**3
    return CostTuple(3 * _contraction(E, N) + 6 * npts, 6 * npts + n1 * n1)


@_register("convect")
def _convect(E, N, **_):
    n1 = N + 1
    npts = E * n1**3
    return CostTuple(3 * _contraction(E, N) + 20 * npts, 14 * npts + n1 * n1)


@_register("gs_op")
def _gs_op(E, N, n_unique=None, **_):
    """Local gather-scatter; `n_unique` defaults to a fully periodic box."""
    npts = E * (N + 1) ** 3
    if n_unique is None:
        n_unique = E * N**3
    return CostTuple(npts - int(n_unique), 2 * npts)


@_register("schwarz_local")
def _schwarz_local(E, N, **_):
    b = (N + 1) ** 3
    return CostTuple(E * b * (2 * b - 1), E * (b * b + 2 * b))


@_register("prolong")
def _prolong(E, N, **_):
    n1 = N + 1
    # coarse (2,2,2) -> (n1,2,2) -> (n1,n1,2) -> (n1,n1,n1); inner dim 2
    outputs = 4 * n1 + 2 * n1 * n1 + n1**3
    return CostTuple(E * outputs * 3, E * (8 + n1**3) + 2 * n1)


@_register("restrict")
def _restrict(E, N, **_):
    n1 = N + 1
    # (n1,n1,n1) -> (2,n1,n1) -> (2,2,n1) -> (2,2,2); inner dim n1
    outputs = 2 * n1 * n1 + 4 * n1 + 8
    return CostTuple(E * outputs * (2 * n1 - 1), E * (8 + n1**3) + 2 * n1)


def kernel_cost(name, E, N, **sizes) -> CostTuple:
    """Static {W, Q} of one invocation of a registered kernel."""
    try:
        fn = KERNELS[name]
    except KeyError:
        raise LookupError(f"unknown kernel {name!r}") from None
    return fn(int(E), int(N), **sizes)


class _Node:
    __slots__ = ("name", "cost", "count", "children")

    def __init__(self, name):
        self.name = name
        self.cost = CostTuple()
        self.count = 0
        self.children = {}


class CostLedger:
    """
    Ordered kernel -> (cost, invocation count) map with nested regions.

    Kernel accumulations are attached under the innermost open region;
    every region's total is the exact sum of its children.
    """

    def __init__(self):
        self.root = _Node("total")
        self._path = [self.root]

    def accumulate(self, name, cost: CostTuple, count: int = 1):
        if name not in KERNELS:
            raise LookupError(f"unknown kernel {name!r}")
        for node in self._path:
            node.cost = node.cost + cost
        leaf = self._path[-1].children.get(name)
        if leaf is None:
            leaf = self._path[-1].children[name] = _Node(name)
        leaf.cost = leaf.cost + cost
        leaf.count += count
        return self

    @contextmanager
    def region(self, name):
        parent = self._path[-1]
        node = parent.children.get(name)
        if node is None:
            node = parent.children[name] = _Node(name)
        node.count += 1
        self._path.append(node)
        try:
            yield node
        finally:
            self._path.pop()

    @property
    def total(self) -> CostTuple:
        return self.root.cost

    def find(self, *path):
        node = self.root
        for name in path:
            node = node.children[name]
        return node

    def kernel_totals(self):
        """Flattened {kernel: (CostTuple, count)} over all regions."""
        out = {}

        def walk(node):
            for child in node.children.values():
                if child.name in KERNELS and not child.children:
                    c, k = out.get(child.name, (CostTuple(), 0))
                    out[child.name] = (c + child.cost, k + child.count)
                else:
                    walk(child)

        walk(self.root)
        return out

    def rows(self):
        """(path, W, Q, count) for every node, depth first."""
        result = []

        def walk(node, prefix):
            for child in node.children.values():
                path = f"{prefix}/{child.name}" if prefix else child.name
                result.append((path, child.cost.W, child.cost.Q, child.count))
                walk(child, path)

        walk(self.root, "")
        return result

    def check_hierarchy(self):
        def walk(node):
            if node.children:
                s = CostTuple()
                for child in node.children.values():
                    walk(child)
                    s = s + child.cost
                if s != node.cost:
                    raise AssertionError(f"region {node.name} != sum of children")

        walk(self.root)
        return True


def accumulate_cost(ledger: CostLedger, name, cost: CostTuple) -> CostLedger:
    return ledger.accumulate(name, cost)


_local = threading.local()


def active_ledger():
    return getattr(_local, "ledger", None)


@contextmanager
def recording(ledger):
    """Route kernel costs executed in this thread into `ledger`."""
    previous = active_ledger()
    _local.ledger = ledger
    try:
        yield ledger
    finally:
        _local.ledger = previous


def record(name, E, N, **sizes):
    ledger = getattr(_local, "ledger", None)
    if ledger is not None:
        ledger.accumulate(name, kernel_cost(name, E, N, **sizes))
