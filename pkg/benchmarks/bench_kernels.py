"""
Compare the numba and pure-numpy paths of the hot kernels.

    python benchmarks/bench_kernels.py [--E 64] [--N 7] [--repeat 20]

Prints one CSV row per kernel and path (median seconds per call, and the
numba speedup). Both paths are checked to agree before timing.
"""
import argparse
import csv
import sys
import time

import numpy as np

from semkit import _accel
from semkit import kernels as K
from semkit.gs import gs_apply
from semkit.mesh import build_box_mesh
from semkit.operators import Discretization


def _median_time(fn, repeat):
    fn()  # warm-up (jit compile on the numba path)
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--E", type=int, default=64, help="elements (rounded to a cube)")
    ap.add_argument("--N", type=int, default=7)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    if not _accel.HAVE_NUMBA:
        print("numba is not importable; only the numpy path is available", file=sys.stderr)
    e = max(1, round(args.E ** (1 / 3)))
    mesh = build_box_mesh(e, e, e, ((0, 1),) * 3, (True, True, True))
    disc = Discretization(mesh, args.N)
    c = disc.coef
    rng = np.random.default_rng(0)
    u = rng.standard_normal(disc.shape)

    kernels = {
        "ax_poisson": lambda: K.ax_poisson(u, c.G, c.space.D),
        "ax_helmholtz": lambda: K.ax_helmholtz(u, c.G, c.space.D, c.B, 0.5, 2.0),
        "gs_add": lambda: gs_apply(disc.gs, u, "add"),
        "gs_max": lambda: gs_apply(disc.gs, u, "max"),
    }
    w = csv.writer(sys.stdout)
    w.writerow(["kernel", "E", "N", "numpy_s", "numba_s", "speedup", "max_abs_diff"])
    prev = _accel.USE_NUMBA
    try:
        for name, fn in kernels.items():
            _accel.set_numba(False)
            ref = fn()
            t_np = _median_time(fn, args.repeat)
            if _accel.HAVE_NUMBA:
                _accel.set_numba(True)
                out = fn()
                t_nb = _median_time(fn, args.repeat)
                diff = float(np.abs(out - ref).max())
            else:
                t_nb, diff = float("nan"), 0.0
            w.writerow([name, disc.E, args.N, f"{t_np:.6g}", f"{t_nb:.6g}", f"{t_np / t_nb:.3g}", f"{diff:.3g}"])
    finally:
        _accel.set_numba(prev)


if __name__ == "__main__":
    main()
