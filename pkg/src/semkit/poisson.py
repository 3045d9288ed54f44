"""
Manufactured-solution Poisson solves on Dirichlet boxes.

Solves -lap u = f with u = g on the non-periodic boundary: the boundary
values are lifted into the right-hand side and the masked stiffness
system is solved by Jacobi-preconditioned CG.
"""
import numpy as np

from . import kernels as K
from .krylov import JacobiPreconditioner, SolverSettings, solve_cg
from .mesh import Mesh
from .operators import Discretization, helmholtz_diagonal

__all__ = ["solve_poisson", "poisson_errors", "poisson_study"]


def solve_poisson(disc: Discretization, f, g=None, settings=None):
    """
    Parameters
    ----------
    disc : Discretization
    f : callable or array
        Source term.
    g : callable or array, optional
        Dirichlet data (zero when omitted); only boundary slots are used.

    Returns
    -------
    (u, SolveResult)
    """
    settings = settings or SolverSettings(tol=1e-12, max_iter=5000)
    fv = disc.field(f) if callable(f) else np.asarray(f, dtype=np.float64)
    gv = disc.zeros() if g is None else (disc.field(g) if callable(g) else np.asarray(g, dtype=np.float64))
    mask = disc.mask
    ub = K.col3(gv, 1.0 - mask)
    b = disc.gs_add(K.col3(disc.coef.B, fv))
    b = K.sub2(b, disc.poisson(ub))
    b = K.col2(b, mask)
    diag = helmholtz_diagonal(disc.coef, 1.0, 0.0, disc.gs)
    if not disc.has_boundary:
        raise ValueError("the Poisson study needs at least one Dirichlet face")
    M = JacobiPreconditioner(diag, mask)
    res = solve_cg(disc.poisson, b, None, M, settings, mask=mask, ip=disc)
    return K.add3(res.x, ub), res


def poisson_errors(disc, u, exact):
    e = K.sub3(u, disc.field(exact))
    linf = disc.comm.allreduce(float(np.abs(e).max()) if e.size else 0.0, "max")
    l2 = float(np.sqrt(max(disc.integral(K.col3(e, e)), 0.0)))
    return linf, l2


def poisson_study(mesh: Mesh, orders, exact, forcing, settings=None, comm=None, partition=None, deterministic=True):
    """
    One row per order: N, global dof count, L-inf and L2 error, CG
    iterations.
    """
    rows = []
    for N in orders:
        disc = Discretization(mesh, int(N), comm=comm, partition=partition, deterministic=deterministic)
        u, res = solve_poisson(disc, forcing, exact, settings)
        linf, l2 = poisson_errors(disc, u, exact)
        rows.append({"N": int(N), "dofs": int(disc.dofmap.n_glob), "linf": linf, "l2": l2, "iters": res.iterations})
    return rows
