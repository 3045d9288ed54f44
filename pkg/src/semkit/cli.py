"""
Command-line front end.

Subcommands::

    semkit run <case>                 flow time series, ledger, optional field dump
    semkit poisson <case>             manufactured-solution convergence table
    semkit model <case> --machine M   modeled step times and scaling limit
    semkit project <case> --machine M...   multi-machine projection table

Exit codes: 0 success, 2 invalid case file, 3 solver failure, 4 I/O
failure. On failure stderr carries one JSON object describing the error.
``SEMKIT_SEED`` overrides the seed of the case file.
"""
import argparse
import csv
import json
import logging
import math
import os
import sys
import time

import jsonschema
import numpy as np

from . import __version__
from .comm import run_spmd
from .config import ConfigError, load_case, number
from .cost import CostLedger
from .expr import ExpressionError, compile_expr, compile_laplacian
from .fielddump import write_fields
from .fluid import FluidSolver, StepFailure, TimeScheme, compute_cfl, diagnostics, init_state, init_tgv
from .krylov import BreakdownError, ConvergenceError, PreconditionerError, SolverSettings
from .mesh import build_box_mesh, partition_mesh
from .operators import Discretization
from .perfmodel import (
    case_cost,
    load_machine,
    model_step_stats,
    model_step_time,
    projection_report,
    scaling_limit,
)
from .poisson import poisson_study

__all__ = ["main", "run_case", "run_poisson_study", "run_model", "run_projection", "EXIT_OK", "EXIT_CONFIG", "EXIT_SOLVER", "EXIT_IO"]

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("semkit")

TIMESERIES_COLUMNS = ["step", "t", "K", "E", "eps", "cfl", "div_inf", "p_iters", "v_iters", "wall_s"]


class SolverFailure(RuntimeError):
    def __init__(self, msg, info=None):
        super().__init__(msg)
        self.info = info or {}


def _fmt(v):
    # shortest round-trip repr; never locale dependent
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def _out(case, key, out_dir=None):
    name = case["output"][key]
    if name is None:
        return None
    return os.path.join(out_dir if out_dir is not None else case["output"]["dir"], name)


def _seed(case, override=None):
    if override is not None:
        return int(override)
    env = os.environ.get("SEMKIT_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SEMKIT_SEED must be an integer (got {env!r})") from None
    return int(case["execution"]["seed"])


def _mesh(case):
    m = case["mesh"]
    ext = tuple((number(lo), number(hi)) for lo, hi in m["extents"])
    Ex, Ey, Ez = m["elements"]
    return build_box_mesh(Ex, Ey, Ez, ext, tuple(m["periodic"]))


def _vector_fn(block, keys=("u", "v", "w")):
    fns = [compile_expr(block[c]) if c in block else None for c in keys]

    def fn(x, y, z, t=0.0):
        shape = np.broadcast(x, y, z).shape
        return tuple(f(x, y, z, t) if f is not None else np.zeros(shape) for f in fns)

    return fn


def _settings(case):
    s = case["solver"]
    pres = SolverSettings(
        tol=s["pressure_tol"], max_iter=s["max_iter"], restart=s["restart"],
        projection_dim=s["projection_dim"], coarse_iter=s["coarse_iter"],
    )
    vel = SolverSettings(tol=s["velocity_tol"], max_iter=s["max_iter"])
    return pres, vel


def _steps(case):
    d = case["discretization"]
    if "dt" not in d:
        raise ConfigError("discretization/dt is required for flow runs")
    if "steps" in d:
        return int(d["steps"])
    if "t_end" not in d:
        raise ConfigError("discretization needs t_end or steps")
    return int(round(d["t_end"] / d["dt"]))


def _initial(case, disc):
    ph = case["physics"]
    init = ph["initial"]
    forcing = _vector_fn(ph["forcing"]) if "forcing" in ph else None
    if init == "tgv":
        st = init_tgv(disc, ph["Re"])
        st.forcing = forcing
        return st
    if init == "rest":
        return init_state(disc, ph["Re"], forcing=forcing)
    fields = {c: compile_expr(src) for c, src in init.items()}
    return init_state(disc, ph["Re"], fields, forcing=forcing)


def _gather(disc, f):
    """Assemble a rank-local field into the full element array on every rank."""
    full = np.zeros((disc.mesh.E,) + disc.shape[1:])
    full[disc.elements] = f
    if disc.comm.size == 1:
        return full
    return disc.comm.allreduce(full)


# -- run -------------------------------------------------------------------------------


def _flow_worker(case, mesh, partition, dump):
    d = case["discretization"]
    ex = case["execution"]
    nsteps = _steps(case)
    cadence = case["output"]["cadence"]
    deterministic = bool(ex["deterministic"])
    pres, vel = _settings(case)
    bc = _vector_fn(case["physics"]["boundary"]) if "boundary" in case["physics"] else None

    def work(comm):
        disc = Discretization(mesh, d["N"], comm=comm, partition=partition, deterministic=deterministic)
        state = _initial(case, disc)
        solver = FluidSolver(
            disc, TimeScheme(d["bdf_order"], d["dt"]), pres, vel, velocity_bc=bc,
            startup=d["startup"], pressure_precon=case["solver"]["pressure_precon"], ledger=CostLedger(),
            pressure_rhs=case["solver"]["pressure_rhs"],
        )
        rows = []

        def sample(n, info, wall):
            g = diagnostics(state, disc)
            rows.append({
                "step": n, "t": state.t, "K": g["K"], "E": g["E"], "eps": g["eps"],
                "cfl": compute_cfl(state, disc.coef, d["dt"], comm),
                "div_inf": g["div"], "p_iters": info.get("p_iters", 0),
                "v_iters": info.get("v_iters", 0), "wall_s": 0.0 if deterministic else wall,
            })

        sample(0, {}, 0.0)
        for n in range(1, nsteps + 1):
            t0 = time.perf_counter()
            try:
                solver.step(state)
            except (StepFailure, ConvergenceError, BreakdownError, PreconditionerError) as exc:
                info = {"step": n, "t": state.t}
                info.update({k: float(v) for k, v in getattr(exc, "residuals", {}).items()})
                raise SolverFailure(str(exc), info) from exc
            wall = time.perf_counter() - t0
            if n % cadence == 0 or n == nsteps:
                sample(n, state.last, wall)
                log.info("step %d t=%.4g K=%.6g", n, state.t, rows[-1]["K"])
        fields = None
        if dump:
            fields = {name: _gather(disc, f) for name, f in zip("uvwp", (*state.velocity, state.p))}
        return rows, solver.ledger.rows(), fields

    return work


def run_case(case, out_dir=None):
    """Run a flow case; returns the time-series rows written by rank 0."""
    mesh = _mesh(case)
    P = case["execution"]["P"]
    if P > mesh.E:
        raise ConfigError(f"execution/P = {P} exceeds the element count {mesh.E}")
    partition = partition_mesh(mesh, P)
    ts = _out(case, "timeseries", out_dir)
    ledger_path = _out(case, "ledger", out_dir)
    dump = _out(case, "field_dump", out_dir)
    results = run_spmd(P, _flow_worker(case, mesh, partition, dump))
    rows, ledger_rows, fields = results[0]
    _write_csv(ts, TIMESERIES_COLUMNS, rows)
    if ledger_path:
        _write_csv(ledger_path, ["region", "W", "Q", "count"],
                   [dict(zip(("region", "W", "Q", "count"), r)) for r in ledger_rows])
    if dump:
        write_fields(dump, fields, case["discretization"]["N"])
    return rows


# -- poisson -----------------------------------------------------------------------------


def run_poisson_study(case, out_dir=None):
    if "solution" not in case["poisson"]:
        raise ConfigError("poisson/solution is required")
    pc = case["poisson"]
    exact = compile_expr(pc["solution"])
    if "forcing" in pc:
        forcing = compile_expr(pc["forcing"])
    else:
        lap = compile_laplacian(pc["solution"])
        forcing = lambda x, y, z: -lap(x, y, z)  # noqa: E731
    mesh = _mesh(case)
    if all(case["mesh"]["periodic"]):
        raise ConfigError("the Poisson study needs a non-periodic direction")
    settings = SolverSettings(tol=pc["tol"], max_iter=max(case["solver"]["max_iter"], 5000))
    P = case["execution"]["P"]
    partition = partition_mesh(mesh, P)

    def work(comm):
        return poisson_study(mesh, pc["orders"], exact, forcing, settings, comm, partition,
                             case["execution"]["deterministic"])

    rows = run_spmd(P, work)[0]
    _write_csv(_out(case, "poisson", out_dir), ["N", "dofs", "linf", "l2", "iters"], rows)
    return rows


# -- model -------------------------------------------------------------------------------


def _measured_cost(case):
    """Instrument one steady step of the case (serial) and return its cost parameters."""
    from .perfmodel import case_cost_from_run

    d = case["discretization"]
    mesh = _mesh(case)
    pres, vel = _settings(case)
    disc = Discretization(mesh, d["N"])
    if disc.has_boundary or case["solver"]["pressure_precon"] != "schwarz":
        raise ConfigError("cost extraction from a run supports periodic Schwarz cases only")
    state = _initial(case, disc)
    solver = FluidSolver(disc, TimeScheme(d["bdf_order"], d["dt"]), pres, vel,
                         startup=d["startup"], pressure_precon="schwarz",
                         pressure_rhs=case["solver"]["pressure_rhs"])
    for _ in range(d["bdf_order"]):
        solver.step(state)
    steps = case["model"]["run_steps"]
    params = []
    solver.ledger = CostLedger()
    comm = disc.comm
    comm.n_allreduce = comm.n_gs = 0
    for _ in range(steps):
        m0 = len(solver.projection)
        c0 = len(solver.pprecon.coarse_log)
        solver.step(state)
        grown = len(solver.projection) == (1 if m0 >= pres.projection_dim else m0 + 1)
        params.append({
            "i": state.last["p_iters"], "j": state.last["v_iters"], "m": m0,
            "coarse_iters": solver.pprecon.coarse_log[c0:], "projection_added": grown,
        })
    measured = case_cost_from_run(solver.ledger, comm, disc.E, disc.N, steps)
    return measured, params, disc


def _cost(case):
    mc = case["model"]
    if mc["cost"] == "run":
        measured, params, disc = _measured_cost(case)
        p = params[-1]
        analytic = case_cost(
            disc.E, disc.N, p["i"], p["j"], p["m"], k=case["discretization"]["bdf_order"],
            restart=case["solver"]["restart"], projection_max=case["solver"]["projection_dim"],
            coarse_iters=p["coarse_iters"], n_unique=disc.gs.n_unique,
            projection_added=p["projection_added"],
        )
        if len(params) == 1 and (analytic.W_step, analytic.Q_step) != (measured.W_step, measured.Q_step):
            log.warning("instrumented and analytic step costs differ")
        measured.params.update(p)
        return measured
    E = mc.get("E")
    if E is None:
        Ex, Ey, Ez = case["mesh"]["elements"]
        E = Ex * Ey * Ez
    N = mc.get("N", case["discretization"]["N"])
    return case_cost(
        E, N, mc["i"], mc["j"], mc["m"], k=mc.get("k", case["discretization"]["bdf_order"]),
        restart=mc.get("restart", case["solver"]["restart"]),
        projection_max=mc.get("projection_dim", case["solver"]["projection_dim"]),
        coarse_iters=mc["coarse_iters"], n_unique=mc.get("n_unique"),
        n_unique_coarse=mc.get("n_unique_coarse"), gmres_cycles=mc.get("gmres_cycles"),
        projection_added=mc.get("projection_added", True),
    )


def _machines(case, paths):
    paths = list(paths or []) or [os.path.join(case["_base_dir"], p) for p in case["model"]["machines"]]
    if not paths:
        raise ConfigError("at least one machine spec is required (--machine)")
    out = []
    for p in paths:
        try:
            out.append(load_machine(p))
        except OSError:
            raise
        except (ValueError, KeyError, TypeError, jsonschema.ValidationError) as exc:
            raise ConfigError(f"machine spec {p}: {getattr(exc, 'message', exc)}") from None
    return out


def _grid(pmin, pmax):
    lo = int(math.ceil(math.log2(max(pmin, 1))))
    hi = int(math.floor(math.log2(pmax)))
    if hi < lo:
        raise ConfigError("empty P grid (pmax < pmin)")
    return [2**e for e in range(lo, hi + 1)]


def run_model(case, machine_paths=None, pmin=None, pmax=None, seed=None, trials=None, expected=None, out_dir=None):
    mc = case["model"]
    machines = _machines(case, machine_paths)
    cost = _cost(case)
    seed = _seed(case, seed)
    trials = trials or mc["trials"]
    expected = mc["expected"] if expected is None else expected
    surface = mc["surface"]
    rows, limits = [], []
    rng = np.random.default_rng(seed)
    for mach in machines:
        grid = _grid(pmin or mc["pmin"], pmax or mc["pmax"] or mach.p_max)
        for P in grid:
            if expected:
                r = model_step_time(cost, mach, P, expected=True, surface=surface)
                rows.append({"machine": mach.name, "P": P, "Ta": r["T_a"], "Tc": r["T_c"], "T": r["T"],
                             "T_p99": r["T"]})
            else:
                s = model_step_stats(cost, mach, P, trials, rng, surface)
                rows.append({"machine": mach.name, "P": P, "Ta": s["T_a"], "Tc": s["T_c_mean"],
                             "T": s["T_mean"], "T_p99": s["T_p99"]})
        lim = scaling_limit(cost, mach, surface)
        limits.append({"machine": mach.name, "P_star": lim.P, "log2_P_star": lim.log2P, "Ta": lim.T_a,
                       "Tc": lim.T_c, "saturated": lim.saturated, "no_limit": lim.no_limit})
    base = _out(case, "model", out_dir)
    _write_csv(base, ["machine", "P", "Ta", "Tc", "T", "T_p99"], rows)
    root, ext = os.path.splitext(base)
    _write_csv(root + "_limit" + (ext or ".csv"),
               ["machine", "P_star", "log2_P_star", "Ta", "Tc", "saturated", "no_limit"], limits)
    _write_csv(root + "_cost" + (ext or ".csv"), ["W_step", "Q_step", "n_allreduce", "n_gs", "n_p"],
               [{"W_step": cost.W_step, "Q_step": cost.Q_step, "n_allreduce": cost.n_allreduce,
                 "n_gs": cost.n_gs, "n_p": cost.n_p}])
    if len(machines) > 1:
        run_projection(case, machine_paths, pmin, pmax, out_dir, cost=cost, machines=machines)
    return rows, limits


def run_projection(case, machine_paths=None, pmin=None, pmax=None, out_dir=None, cost=None, machines=None):
    mc = case["model"]
    machines = machines or _machines(case, machine_paths)
    cost = cost or _cost(case)
    grid = _grid(pmin or mc["pmin"], pmax or mc["pmax"] or machines[0].p_max)
    rows = projection_report(cost, machines, grid, mc["surface"])
    _write_csv(_out(case, "projection", out_dir), ["machine", "P", "Ta", "Tc", "T", "speedup"], rows)
    return rows


# -- entry point ---------------------------------------------------------------------


def _parser():
    p = argparse.ArgumentParser(prog="semkit", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a flow case")
    r.add_argument("case")
    r.add_argument("--out", help="output directory (overrides the case file)")

    q = sub.add_parser("poisson", help="Poisson convergence study")
    q.add_argument("case")
    q.add_argument("--out")

    for name, helptext in (("model", "modeled step time over P"), ("project", "multi-machine projection")):
        m = sub.add_parser(name, help=helptext)
        m.add_argument("case")
        m.add_argument("--machine", action="append", default=[], help="machine spec file (repeatable)")
        m.add_argument("--pmin", type=int)
        m.add_argument("--pmax", type=int)
        m.add_argument("--out")
        if name == "model":
            m.add_argument("--seed", type=int)
            m.add_argument("--trials", type=int)
            m.add_argument("--expected", action="store_true", default=None,
                           help="replace latency samplers by their means")
    return p


def _fail(code, kind, message, **extra):
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": message, **extra}) + "\n")
    return code


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        case = load_case(args.case)
        if args.cmd == "run":
            run_case(case, args.out)
        elif args.cmd == "poisson":
            run_poisson_study(case, args.out)
        elif args.cmd == "model":
            run_model(case, args.machine, args.pmin, args.pmax, args.seed, args.trials, args.expected, args.out)
        else:
            run_projection(case, args.machine, args.pmin, args.pmax, args.out)
    except (ConfigError, ExpressionError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except SolverFailure as exc:
        return _fail(EXIT_SOLVER, "solver", str(exc), **exc.info)
    except (StepFailure, ConvergenceError, BreakdownError, PreconditionerError) as exc:
        return _fail(EXIT_SOLVER, "solver", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc), path=getattr(exc, "filename", None))
    except ValueError as exc:
        # invalid values that pass the schema (mesh shape, box size, ...)
        return _fail(EXIT_CONFIG, "config", str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
