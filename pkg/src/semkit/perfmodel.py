"""
Analytic performance model for one time step.

Arithmetic time follows a roofline bound over all PEs,

    T_a = max(W / (pi P), Q / (beta P)),

and communication is split into Allreduce calls (a tree of
ceil(log2 P) latency-bound levels, the slowest PE decides) and
gather-scatter calls (two latencies plus the surface traffic of a cube of
elements per PE). The step time is T = T_a + T_c.

Latencies come from a sampler: a constant, an empirical set of measured
values (sampled with replacement), or a lognormal. ``expected=True``
replaces every sampler by its mean, which makes all outputs deterministic.
"""
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .cost import CostTuple, kernel_cost

__all__ = [
    "ConstantLatency",
    "EmpiricalLatency",
    "LognormalLatency",
    "MachineSpec",
    "load_machine",
    "CaseCost",
    "StepTrace",
    "case_cost",
    "case_cost_from_run",
    "arithmetic_time",
    "allreduce_time",
    "gather_scatter_time",
    "model_step_time",
    "model_step_stats",
    "ScalingLimit",
    "scaling_limit",
    "projection_report",
]


# -- latency samplers --------------------------------------------------------


class ConstantLatency:
    def __init__(self, value):
        if not value >= 0:
            raise ValueError("latency must be nonnegative")
        self.value = float(value)

    def sample(self, rng, size):
        return np.full(size, self.value)

    def mean(self):
        return self.value

    @property
    def minimum(self):
        return self.value


class EmpiricalLatency:
    """Measured latencies in seconds, drawn with replacement."""

    def __init__(self, samples, source=None):
        samples = np.asarray(samples, dtype=np.float64).ravel()
        if samples.size == 0:
            raise ValueError("empirical latency set is empty")
        if np.any(samples < 0) or not np.all(np.isfinite(samples)):
            raise ValueError("latency samples must be finite and nonnegative")
        self.samples = samples
        self.source = source

    @classmethod
    def from_file(cls, path):
        vals = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    vals.append(float(line))
        return cls(vals, source=str(path))

    def sample(self, rng, size):
        return rng.choice(self.samples, size=size, replace=True)

    def mean(self):
        return float(self.samples.mean())

    @property
    def minimum(self):
        return float(self.samples.min())


class LognormalLatency:
    def __init__(self, median, sigma):
        if not median > 0 or not sigma >= 0:
            raise ValueError("lognormal latency needs median > 0 and sigma >= 0")
        self.median = float(median)
        self.sigma = float(sigma)

    def sample(self, rng, size):
        return rng.lognormal(math.log(self.median), self.sigma, size=size)

    def mean(self):
        return self.median * math.exp(0.5 * self.sigma**2)

    @property
    def minimum(self):
        return 0.0


def _make_latency(spec, base_dir=None):
    if isinstance(spec, (int, float)):
        return ConstantLatency(spec)
    kind = spec.get("kind")
    if kind == "constant":
        return ConstantLatency(spec["value"])
    if kind == "empirical":
        path = spec.get("file") or spec.get("value")
        if base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return EmpiricalLatency.from_file(path)
    if kind == "lognormal":
        return LognormalLatency(spec["value"], spec["sigma"])
    raise ValueError(f"unknown latency kind {kind!r}")


# -- machine ---------------------------------------------------------------------


@dataclass
class MachineSpec:
    """
    Machine parameters of the model.

    Parameters
    ----------
    name : str
    pi : float
        Peak flop/s per PE.
    beta : float
        Memory bandwidth per PE in 64-bit words/s.
    latency : sampler
        Network latency alpha* in seconds.
    inv_bandwidth : float
        Network inverse bandwidth beta* in s per 64-bit word.
    p_max : int
        Largest PE count considered.
    """

    name: str
    pi: float
    beta: float
    latency: object
    inv_bandwidth: float = 0.0
    p_max: int = 2**20

    def __post_init__(self):
        if not (self.pi > 0 and self.beta > 0):
            raise ValueError("pi and beta must be positive")
        if self.inv_bandwidth < 0:
            raise ValueError("inverse bandwidth must be nonnegative")
        if self.p_max < 1:
            raise ValueError("p_max must be >= 1")
        if isinstance(self.latency, (int, float)):
            self.latency = ConstantLatency(self.latency)

    @classmethod
    def from_dict(cls, d, base_dir=None):
        """
        Build from the file layout, which states node totals:
        ``node_bandwidth_GBs`` is split evenly over ``pes_per_node``.
        """
        words = float(d["node_bandwidth_GBs"]) * 1e9 / 8.0
        return cls(
            name=d["name"],
            pi=float(d["peak_flops_per_pe"]),
            beta=words / int(d["pes_per_node"]),
            latency=_make_latency(d["latency"], base_dir),
            inv_bandwidth=float(d.get("inv_bandwidth_s_per_word", 0.0)),
            p_max=int(d.get("p_max", 2**20)),
        )

    def expected(self):
        """Copy with the latency sampler replaced by its mean."""
        return MachineSpec(self.name, self.pi, self.beta, ConstantLatency(self.latency.mean()), self.inv_bandwidth, self.p_max)


MACHINE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "node_bandwidth_GBs", "pes_per_node", "peak_flops_per_pe", "latency"],
    "properties": {
        "name": {"type": "string"},
        "node_bandwidth_GBs": {"type": "number", "exclusiveMinimum": 0},
        "pes_per_node": {"type": "integer", "minimum": 1},
        "peak_flops_per_pe": {"type": "number", "exclusiveMinimum": 0},
        "inv_bandwidth_s_per_word": {"type": "number", "minimum": 0},
        "p_max": {"type": "integer", "minimum": 1},
        "latency": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["constant", "empirical", "lognormal"]},
                "value": {"type": ["number", "string"]},
                "file": {"type": "string"},
                "sigma": {"type": "number", "minimum": 0},
            },
        },
    },
}


def load_machine(path) -> MachineSpec:
    import jsonschema

    with open(path) as fh:
        d = json.load(fh)
    jsonschema.validate(d, MACHINE_SCHEMA)
    return MachineSpec.from_dict(d, base_dir=os.path.dirname(os.path.abspath(path)))


# -- case cost ---------------------------------------------------------------------


@dataclass
class CaseCost:
    """Per-step totals that drive the model."""

    W_step: int
    Q_step: int
    n_allreduce: int
    n_gs: int
    n_p: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.W_step, self.Q_step, self.n_allreduce, self.n_gs, self.n_p) < 0:
            raise ValueError("case costs are nonnegative")


class StepTrace:
    """Kernel invocations of one step, replayed from the solver's code paths."""

    def __init__(self):
        self.kernels = {}
        self.n_allreduce = 0
        self.n_gs = 0

    def k(self, name, E, N, times=1, **sizes):
        if times <= 0:
            return
        c = kernel_cost(name, E, N, **sizes) * times
        prev, cnt = self.kernels.get(name, (CostTuple(), 0))
        self.kernels[name] = (prev + c, cnt + times)

    def gs(self, E, N, n_unique, times=1):
        self.k("gs_op", E, N, times, n_unique=n_unique)
        self.n_gs += times

    def ar(self, times=1):
        self.n_allreduce += times

    @property
    def total(self) -> CostTuple:
        s = CostTuple()
        for c, _ in self.kernels.values():
            s = s + c
        return s


def _split_cycles(i, restart):
    if i <= 0:
        return []
    full, rest = divmod(i, restart)
    cycles = [restart] * full
    if rest:
        cycles.append(rest)
    return cycles


def case_cost(
    E,
    N,
    i,
    j,
    m,
    k=3,
    restart=30,
    projection_max=20,
    coarse_iters=10,
    n_unique=None,
    n_unique_coarse=None,
    gmres_cycles=None,
    projection_added=True,
    trace=False,
):
    """
    Closed-form cost of one steady (order-k) step of the periodic solver
    with Schwarz-preconditioned pressure and Jacobi-preconditioned velocity.

    Parameters
    ----------
    E, N : int
        Elements and polynomial order (on one PE; the model divides by P).
    i : int
        Pressure GMRES iterations in the step.
    j : int
        Velocity CG iterations summed over the three components (each
        component is assumed to take at least one).
    m : int
        Projection directions stored when the step starts.
    coarse_iters : int or sequence
        Coarse CG iterations per preconditioner application. The coarse
        solve stops early at roundoff, so an instrumented run supplies the
        actual list.
    gmres_cycles : sequence, optional
        Iterations per restart cycle; defaults to full cycles of
        ``restart`` followed by the remainder.
    projection_added : bool
        False when the new pressure added no direction to the projection
        space (it was already in the span), which skips the normalization.
    """
    if min(E, N, i, j, m, k) < 0 or N < 1 or k < 1:
        raise ValueError("invalid case parameters")
    if n_unique is None:
        n_unique = E * N**3
    if n_unique_coarse is None:
        n_unique_coarse = E
    if isinstance(coarse_iters, (int, np.integer)):
        coarse_iters = [int(coarse_iters)] * i
    coarse_iters = list(coarse_iters)
    if len(coarse_iters) != i:
        raise ValueError("need one coarse iteration count per GMRES iteration")
    cycles = list(gmres_cycles) if gmres_cycles is not None else _split_cycles(i, restart)
    if sum(cycles) != i:
        raise ValueError("GMRES cycles do not add up to the iteration count")

    t = StepTrace()
    fine = lambda name, times=1: t.k(name, E, N, times)  # noqa: E731
    coarse = lambda name, times=1: t.k(name, E, 1, times)  # noqa: E731

    def poisson():
        fine("ax_poisson")
        t.gs(E, N, n_unique)

    def remove_constant():
        fine("glsc3")
        t.ar()
        fine("cadd")

    def remove_mean():
        fine("glsc2")
        t.ar()
        fine("cadd")

    def schwarz(ci):
        fine("col3")
        fine("schwarz_local")
        t.gs(E, N, n_unique)
        fine("col2")
        # coarse level
        fine("col3")
        fine("restrict")
        t.gs(E, 1, n_unique_coarse)
        coarse("glsc3", 2)
        t.ar(2)
        coarse("cadd")
        coarse("copy")
        coarse("col3")
        coarse("glsc3", 2)
        t.ar()
        if ci:
            coarse("copy")
            coarse("add2s1", ci - 1)
            coarse("ax_poisson", ci)
            t.gs(E, 1, n_unique_coarse, ci)
            coarse("glsc3", ci)
            t.ar(ci)
            coarse("axpy", 2 * ci)
            coarse("col3", ci)
            coarse("glsc3", 2 * ci)
            t.ar(ci)
        fine("prolong")
        fine("add2")
        remove_mean()

    # advection of the newest velocity
    for _ in range(3):
        fine("convect")
        t.gs(E, N, n_unique)
        fine("col2")

    # extrapolated right-hand sides
    fine("cmult2", 3)
    fine("axpy", 3 * (k - 1))
    fine("copy", 3)
    fine("axpy", 3 * k)

    # pressure right-hand side
    fine("cdtp", 3)
    fine("add2", 2)
    t.gs(E, N, n_unique)
    remove_constant()

    # projection onto previous solutions
    if m:
        fine("glsc3", m)
        t.ar()
        fine("copy")
        fine("axpy", 2 * m)
    else:
        fine("copy")
    remove_constant()

    # GMRES
    poisson()
    fine("sub3")
    fine("glsc3")
    t.ar()
    it = 0
    for c_idx, nc in enumerate(cycles):
        last = c_idx == len(cycles) - 1
        fine("cmult2")
        for jj in range(nc):
            schwarz(coarse_iters[it])
            poisson()
            for _ in range(2):
                fine("glsc3", jj + 1)
                t.ar()
                fine("axpy", jj + 1)
            fine("glsc3")
            t.ar()
            if not (last and jj == nc - 1):
                fine("cmult2")
            it += 1
        fine("axpy", nc)
        poisson()
        fine("sub3")
        fine("glsc3")
        t.ar()

    # assemble the pressure and update the projection space
    fine("add3")
    remove_mean()
    mm = 0 if m >= projection_max else m
    if projection_max > 0:
        fine("copy")
        if mm:
            fine("glsc3", 2 * mm)
            t.ar(2)
            fine("axpy", 2 * mm)
        poisson()
        fine("glsc3")
        t.ar()
        if projection_added:
            fine("cmult", 2)

    # velocity Helmholtz solves
    for _ in range(3):
        fine("dudxyz")
        fine("sub3")
        fine("col3")
        t.gs(E, N, n_unique)
        fine("ax_helmholtz")
        t.gs(E, N, n_unique)
        fine("sub3")
        fine("col3")
        fine("glsc3", 2)
        t.ar()
    if j:
        fine("copy", 3)
        fine("add2s1", j - 3)
        fine("ax_helmholtz", j)
        t.gs(E, N, n_unique, j)
        fine("glsc3", j)
        t.ar(j)
        fine("axpy", 2 * j)
        fine("col3", j)
        fine("glsc3", 2 * j)
        t.ar(j)

    # divergence diagnostic
    fine("dudxyz", 3)
    fine("add3")
    fine("add2")
    t.gs(E, N, n_unique)
    fine("col2")
    t.ar()

    tot = t.total
    cost = CaseCost(
        tot.W, tot.Q, t.n_allreduce, t.n_gs, E * (N + 1) ** 3,
        params={"E": E, "N": N, "i": i, "j": j, "m": m, "k": k},
    )
    return (cost, t) if trace else cost


def case_cost_from_run(ledger, comm, E, N, steps=1, **params) -> CaseCost:
    """Per-step averages of an instrumented run (ledger plus comm counters)."""
    tot = ledger.total
    return CaseCost(
        tot.W // steps, tot.Q // steps, comm.n_allreduce // steps, comm.n_gs // steps,
        E * (N + 1) ** 3, params=dict(params, E=E, N=N),
    )


# -- time model ----------------------------------------------------------------------


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def arithmetic_time(cost, machine: MachineSpec, P) -> float:
    if P < 1:
        raise ValueError("P must be >= 1")
    return max(cost.W_step / (machine.pi * P), cost.Q_step / (machine.beta * P))


def _levels(P):
    return int(math.ceil(math.log2(P))) if P > 1 else 0


def allreduce_time(machine: MachineSpec, P, seed=None, expected=False) -> float:
    """
    Slowest of P tree paths, each the sum of ceil(log2 P) sampled latencies.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    L = _levels(P)
    if L == 0:
        return 0.0
    lat = machine.latency
    if expected:
        return lat.mean() * L
    if isinstance(lat, ConstantLatency):
        return lat.value * L
    rng = _rng(seed)
    worst = 0.0
    chunk = max(1, 2**22 // L)
    left = int(P)
    while left > 0:
        n = min(chunk, left)
        worst = max(worst, float(lat.sample(rng, (n, L)).sum(axis=1).max()))
        left -= n
    return worst


def gather_scatter_time(machine: MachineSpec, n_p, P, seed=None, expected=False, surface="per_pe") -> float:
    """
    Neighbour exchange of a cube of points per PE: two latencies per
    direction (slowest of six) plus 2 beta* words per surface point.

    ``surface="literal"`` uses n_p**(2/3) instead of (n_p/P)**(2/3).
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    if P == 1:
        return 0.0
    if surface == "per_pe":
        pts = n_p / P
    elif surface == "literal":
        pts = n_p
    else:
        raise ValueError(f"unknown surface mode {surface!r}")
    bw = 2.0 * machine.inv_bandwidth * pts ** (2.0 / 3.0)
    lat = machine.latency
    if expected:
        return bw + 2.0 * lat.mean()
    if isinstance(lat, ConstantLatency):
        return bw + 2.0 * lat.value
    s = lat.sample(_rng(seed), (6, 2))
    return bw + float(s.sum(axis=1).max())


def model_step_time(cost, machine: MachineSpec, P, seed=None, expected=False, surface="per_pe") -> dict:
    rng = _rng(seed)
    Ta = arithmetic_time(cost, machine, P)
    ar = allreduce_time(machine, P, rng, expected) if cost.n_allreduce else 0.0
    gs = gather_scatter_time(machine, cost.n_p, P, rng, expected, surface) if cost.n_gs else 0.0
    Tc = cost.n_allreduce * ar + cost.n_gs * gs
    return {"T": Ta + Tc, "T_a": Ta, "T_c": Tc}


def model_step_stats(cost, machine, P, trials=1000, seed=None, surface="per_pe") -> dict:
    """Mean and 99th percentile of the stochastic step time."""
    rng = _rng(seed)
    T = np.array([model_step_time(cost, machine, P, rng, False, surface)["T"] for _ in range(trials)])
    Ta = arithmetic_time(cost, machine, P)
    return {"T_a": Ta, "T_mean": float(T.mean()), "T_p99": float(np.percentile(T, 99)), "T_c_mean": float(T.mean() - Ta)}


# -- scaling limit and projections ----------------------------------------------------


@dataclass
class ScalingLimit:
    P: float
    log2P: float
    T_a: float
    T_c: float
    saturated: bool = False
    no_limit: bool = False

    @property
    def rel_gap(self):
        T = self.T_a + self.T_c
        return abs(self.T_a - self.T_c) / T if T > 0 else 0.0


def _smooth_times(cost, mach, x, surface):
    # expected values with a continuous log2 P, so T_c has no steps
    P = 2.0**x
    Ta = arithmetic_time(cost, mach, P)
    lat = mach.latency.mean()
    pts = cost.n_p / P if surface == "per_pe" else cost.n_p
    gs = 2.0 * mach.inv_bandwidth * pts ** (2.0 / 3.0) + 2.0 * lat
    Tc = cost.n_allreduce * lat * x + cost.n_gs * gs
    return Ta, Tc


def scaling_limit(cost, machine: MachineSpec, surface="per_pe", rtol=1e-6) -> ScalingLimit:
    """
    PE count where arithmetic and communication times cross, found by
    bisection on log2 P in expected-value mode.
    """
    xmax = math.log2(machine.p_max)
    lo_a, lo_c = _smooth_times(cost, machine, 0.0, surface)
    hi_a, hi_c = _smooth_times(cost, machine, xmax, surface)
    if cost.n_allreduce == 0 and cost.n_gs == 0 or (hi_c == 0.0 and lo_c == 0.0):
        return ScalingLimit(float(machine.p_max), xmax, hi_a, hi_c, saturated=True, no_limit=True)
    if hi_a - hi_c > 0:
        return ScalingLimit(float(machine.p_max), xmax, hi_a, hi_c, saturated=True)
    if lo_a - lo_c <= 0:
        return ScalingLimit(1.0, 0.0, lo_a, lo_c)
    lo, hi = 0.0, xmax
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        Ta, Tc = _smooth_times(cost, machine, mid, surface)
        if abs(Ta - Tc) / (Ta + Tc) < rtol * 1e-3 or hi - lo < 1e-15:
            break
        if Ta > Tc:
            lo = mid
        else:
            hi = mid
    return ScalingLimit(2.0**mid, mid, Ta, Tc)


def projection_report(cost, machines, P_grid, surface="per_pe") -> list:
    """Expected-value step times per machine and P, with speedup over the first machine."""
    if not machines:
        raise ValueError("need at least one machine")
    rows = []
    base = {}
    for mi, mach in enumerate(machines):
        for P in P_grid:
            r = model_step_time(cost, mach, P, expected=True, surface=surface)
            if mi == 0:
                base[P] = r["T"]
            rows.append({
                "machine": mach.name,
                "P": int(P),
                "Ta": r["T_a"],
                "Tc": r["T_c"],
                "T": r["T"],
                "speedup": base[P] / r["T"] if r["T"] > 0 else 1.0,
            })
    return rows
