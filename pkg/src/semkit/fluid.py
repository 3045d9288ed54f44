"""
P_N-P_N incompressible Navier-Stokes stepper.

Each step extrapolates the advection term, solves one pressure Poisson
problem (GMRES + two-level Schwarz + projection) and three velocity
Helmholtz problems (Jacobi-preconditioned CG):

    A p   = sum_d (d q/d x_d, X_d)          X = sum_j a_j (-N^{n-j}) + f^n
    H u_d = B (F_d - d p/d x_d)             F = X - sum_{j>=1} (b_j/dt) u^{n-j}
                                            H = A/Re + (b_0/dt) B

By default the BDF lag velocities enter only the velocity equation:
they are divergence-free in the continuum, and feeding their discrete
divergence back into the pressure ties the solution to the number of
steps taken rather than to dt. The price is that divergence generated by
the splitting is never removed and accumulates; ``pressure_rhs="bdf"``
(periodic domains only) selects the feedback form instead.

With velocity Dirichlet boundaries the pressure right-hand side also
carries the extrapolated viscous (curl-curl) term and the boundary
velocity divergence term, written as volume integrals.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .cost import CostLedger, recording
from .krylov import (
    ProjectionSpace,
    SchwarzPreconditioner,
    SolverSettings,
    JacobiPreconditioner,
    project_rhs,
    solve_cg,
    solve_gmres,
    update_projection_space,
)
from .operators import Discretization, helmholtz_diagonal

__all__ = [
    "TimeScheme",
    "FluidState",
    "FluidSolver",
    "StepFailure",
    "DivergenceFailure",
    "bdf_ext_coefficients",
    "init_tgv",
    "init_state",
    "compute_cfl",
    "diagnostics",
    "step",
]

_BDF = {
    1: ((1.0, -1.0), (1.0,)),
    2: ((1.5, -2.0, 0.5), (2.0, -1.0)),
    3: ((11.0 / 6.0, -3.0, 1.5, -1.0 / 3.0), (3.0, -3.0, 1.0)),
}


class StepFailure(RuntimeError):
    """A linear solve inside a step did not converge."""

    def __init__(self, msg, residuals=None):
        super().__init__(msg)
        self.residuals = residuals or {}


class DivergenceFailure(StepFailure):
    """Non-finite values appeared in a field."""

    def __init__(self, msg, field_name):
        super().__init__(msg)
        self.field = field_name


def bdf_ext_coefficients(k):
    """BDF-k coefficients b_0..b_k and EXT-k coefficients a_1..a_k."""
    if k not in _BDF:
        raise ValueError(f"BDF/EXT order must be 1, 2 or 3 (got {k!r})")
    b, a = _BDF[k]
    return np.array(b), np.array(a)


@dataclass(frozen=True)
class TimeScheme:
    k: int
    dt: float

    def __post_init__(self):
        if self.k not in _BDF:
            raise ValueError(f"BDF/EXT order must be 1, 2 or 3 (got {self.k!r})")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def b(self):
        return bdf_ext_coefficients(self.k)[0]

    @property
    def a(self):
        return bdf_ext_coefficients(self.k)[1]


@dataclass
class FluidState:
    """
    Velocity, pressure and lag history of one rank.

    ``ulag[0]`` is the current velocity triple, ``ulag[1]`` the previous one
    and so on; ``nlag[j]`` holds the advection term of ``ulag[j + 1]``
    (the current one is computed at the start of each step).
    """

    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    p: np.ndarray
    Re: float
    t: float = 0.0
    n: int = 0
    ulag: list = field(default_factory=list, repr=False)
    nlag: list = field(default_factory=list, repr=False)
    forcing: object = field(default=None, repr=False)
    last: dict = field(default_factory=dict)

    @property
    def velocity(self):
        return self.u, self.v, self.w

    def copy(self):
        return FluidState(
            self.u.copy(), self.v.copy(), self.w.copy(), self.p.copy(), self.Re, self.t, self.n,
            [tuple(f.copy() for f in tr) for tr in self.ulag],
            [tuple(f.copy() for f in tr) for tr in self.nlag],
            self.forcing, dict(self.last),
        )


def init_state(disc, Re, fields=None, t=0.0, forcing=None):
    """State from callables ``(x, y, z[, t]) -> value`` (zero when omitted)."""
    fields = fields or {}
    vals = [disc.field(fields[c], t) if c in fields else disc.zeros() for c in ("u", "v", "w", "p")]
    u, v, w, p = vals
    st = FluidState(u, v, w, p, float(Re), t=float(t), forcing=forcing)
    st.ulag = [(u.copy(), v.copy(), w.copy())]
    return st


def init_tgv(disc, Re):
    """
    Taylor-Green vortex on the periodic (0, 2 pi)^3 box, divergence-free
    form: u = sin x cos y cos z, v = -cos x sin y cos z, w = 0.
    """
    mesh = disc.mesh
    if not mesh.fully_periodic:
        raise ValueError("the Taylor-Green vortex needs a fully periodic mesh")
    for lo, hi in mesh.extents:
        if abs((hi - lo) - 2.0 * np.pi) > 1e-9:
            raise ValueError("the Taylor-Green vortex needs a (0, 2 pi)^3 box")
    return init_state(
        disc,
        Re,
        {
            "u": lambda x, y, z: np.sin(x) * np.cos(y) * np.cos(z),
            "v": lambda x, y, z: -np.cos(x) * np.sin(y) * np.cos(z),
        },
    )


def compute_cfl(state, coef, dt, comm=None):
    """max over points of dt * sum_a |u_a| / Delta_a."""
    c = dt * sum(np.abs(f) / coef.spacing[a] for a, f in enumerate(state.velocity))
    local = float(c.max()) if c.size else 0.0
    return comm.allreduce(local, "max") if comm is not None else local


def diagnostics(state, disc):
    """Kinetic energy, enstrophy, dissipation (2/Re) E and max |div u|."""
    u, v, w = state.velocity
    Kin = 0.5 * sum(disc.integral(K.col3(f, f)) for f in (u, v, w))
    om = disc.curl(u, v, w)
    Ens = sum(disc.integral(K.col3(f, f)) for f in om)
    div = disc.divergence(u, v, w)
    dmax = disc.comm.allreduce(float(np.abs(div).max()), "max")
    return {"K": Kin, "E": Ens, "eps": 2.0 / state.Re * Ens, "div": dmax}


def _check_finite(names_fields):
    for name, f in names_fields:
        if not np.all(np.isfinite(f)):
            raise DivergenceFailure(f"non-finite values in field {name}", name)


class FluidSolver:
    """
    Solver stack of one rank: pressure GMRES with Schwarz + projection,
    velocity CG with Jacobi.

    Parameters
    ----------
    disc : Discretization
    scheme : TimeScheme
    pressure : SolverSettings
        Defaults: tol 1e-7, restart 30, projection 20, coarse CG 10.
    velocity : SolverSettings
        Defaults: tol 1e-9.
    velocity_bc : callable, optional
        ``(x, y, z, t) -> (u, v, w)`` boundary values on Dirichlet faces.
    startup : {"richardson", "plain"}
        First-step treatment; "richardson" extrapolates two BDF1 half
        steps against one full step so the startup keeps third order.
    pressure_precon : {"schwarz", "jacobi"}
    pressure_rhs : {"explicit", "bdf"}
        "explicit" drives the pressure with the extrapolated advection and
        forcing only. "bdf" also takes the divergence of the BDF lag
        velocities, which removes lagged divergence every step at the cost
        of an O(dt^0) coupling to the spatial divergence floor (time order
        is lost on coarse meshes).
    """

    def __init__(
        self,
        disc: Discretization,
        scheme: TimeScheme,
        pressure=None,
        velocity=None,
        velocity_bc=None,
        startup="richardson",
        pressure_precon="schwarz",
        coarse=None,
        ledger=None,
        pressure_rhs="explicit",
    ):
        self.disc = disc
        self.scheme = scheme
        self.ps = pressure or SolverSettings(tol=1e-7)
        self.vs = velocity or SolverSettings(tol=1e-9)
        self.velocity_bc = velocity_bc
        if startup not in ("richardson", "plain"):
            raise ValueError("startup must be 'richardson' or 'plain'")
        self.startup = startup
        if pressure_rhs not in ("explicit", "bdf"):
            raise ValueError("pressure_rhs must be 'explicit' or 'bdf'")
        if pressure_rhs == "bdf" and disc.has_boundary:
            raise ValueError("pressure_rhs='bdf' is only available on fully periodic domains")
        self.pressure_rhs = pressure_rhs
        self.ledger = ledger if ledger is not None else CostLedger()
        if disc.has_boundary and velocity_bc is None:
            self.velocity_bc = lambda x, y, z, t: (0.0, 0.0, 0.0)
        self.vmask = disc.mask if disc.has_boundary else None
        if pressure_precon == "schwarz":
            if coarse is None:
                coarse = Discretization(
                    disc.mesh, 1, comm=disc.comm, partition=disc.partition,
                    deterministic=disc.gs.deterministic,
                )
            self.coarse = coarse
            self.pprecon = SchwarzPreconditioner(disc, coarse, self.ps)
        elif pressure_precon == "jacobi":
            self.coarse = None
            self.pprecon = JacobiPreconditioner(helmholtz_diagonal(disc.coef, 1.0, 0.0, disc.gs))
        else:
            raise ValueError(f"unknown pressure preconditioner {pressure_precon!r}")
        self.projection = ProjectionSpace(self.ps.projection_dim)
        self._jacobi = {}
        self._poisson = _Bound(disc.poisson, "poisson")

    # -- pieces ------------------------------------------------------------

    def _velocity_precon(self, h1, h2):
        key = (h1, h2)
        if key not in self._jacobi:
            d = helmholtz_diagonal(self.disc.coef, h1, h2, self.disc.gs)
            self._jacobi = {key: JacobiPreconditioner(d, self.vmask)}
        return self._jacobi[key]

    def _remove_mean(self, z):
        return K.cadd(z, -self.disc.mean(z))

    def _remove_constant(self, r):
        d = self.disc
        one = np.ones_like(r)
        s = d.dot(r, one) / d.dofmap.n_glob
        return K.cadd(r, -s)

    def _boundary(self, t):
        d = self.disc
        vals = self.velocity_bc(d.coef.x, d.coef.y, d.coef.z, t)
        out = []
        for g in vals:
            g = np.broadcast_to(np.asarray(g, dtype=np.float64), d.shape)
            out.append(np.where(self.vmask > 0, 0.0, g))
        return out

    def pressure_solve(self, rhs):
        """Projection-accelerated GMRES on the singular pressure operator."""
        d = self.disc
        A = self._poisson
        with self.ledger.region("projection"):
            xp, bd = project_rhs(self.projection, rhs, A, ip=d)
            # rounding in the stored A z leaves a small null-space component
            bd = self._remove_constant(bd)
        with self.ledger.region("gmres"):
            res = solve_gmres(
                A, bd, None, lambda r: self._remove_mean(self.pprecon(r)), self.ps, ip=d
            )
        if not res.converged:
            raise StepFailure(
                f"pressure GMRES did not converge (residual {res.residual:.3e})",
                {"pressure": res.residual},
            )
        with self.ledger.region("projection"):
            p = K.add3(xp, res.x)
            p = self._remove_mean(p)
            update_projection_space(self.projection, p, A, ip=d)
        return p, res

    def _substep(self, state, k, dt, t_new, ulag, nlag):
        """One BDF-k/EXT-k step from the supplied history (no state mutation)."""
        d = self.disc
        b, a = bdf_ext_coefficients(k)
        nu = 1.0 / state.Re
        D, J = d.space.D, d.coef.dxidx

        with self.ledger.region("rhs"):
            # extrapolated advection plus forcing, then the BDF lag terms
            Fext = []
            for c in range(3):
                f = K.cmult2(nlag[0][c], -a[0])
                for j in range(1, k):
                    f = K.axpy(f, -a[j], nlag[j][c])
                Fext.append(f)
            if state.forcing is not None:
                fvals = state.forcing(d.coef.x, d.coef.y, d.coef.z, t_new)
                Fext = [K.add2(f, np.broadcast_to(np.asarray(g, dtype=np.float64), d.shape)) for f, g in zip(Fext, fvals)]
            F = []
            for c in range(3):
                f = K.copy(Fext[c])
                for j in range(1, k + 1):
                    f = K.axpy(f, -b[j] / dt, ulag[j - 1][c])
                F.append(f)

        g = None
        with self.ledger.region("pressure"):
            with self.ledger.region("rhs"):
                Fp = Fext if self.pressure_rhs == "explicit" else F
                if self.vmask is not None:
                    # boundary du/dt and extrapolated curl-curl terms, moved to
                    # volume integrals with boundary-supported lifts
                    g = self._boundary(t_new)
                    bnd = 1.0 - self.vmask
                    ustar, gt = [], []
                    for c in range(3):
                        s = K.cmult2(ulag[0][c], a[0])
                        for j in range(1, k):
                            s = K.axpy(s, a[j], ulag[j][c])
                        ustar.append(s)
                        h = K.cmult2(g[c], b[0] / dt)
                        for j in range(1, k + 1):
                            h = K.axpy(h, b[j] / dt, K.col3(ulag[j - 1][c], bnd))
                        gt.append(h)
                    om = d.curl(*ustar)
                    cc = d.curl(*om)
                    Fp = [K.sub2(K.axpy(K.copy(Fp[c]), -nu, cc[c]), gt[c]) for c in range(3)]
                rhs = K.cdtp(Fp[0], J, d.coef.B, D, 0)
                rhs = K.add2(rhs, K.cdtp(Fp[1], J, d.coef.B, D, 1))
                rhs = K.add2(rhs, K.cdtp(Fp[2], J, d.coef.B, D, 2))
                if g is not None:
                    divg = K.add3(K.dudxyz(gt[0], J, D, 0), K.dudxyz(gt[1], J, D, 1))
                    divg = K.add2(divg, K.dudxyz(gt[2], J, D, 2))
                    rhs = K.axpy(rhs, -1.0, K.col3(d.coef.B, divg))
                rhs = d.gs_add(rhs)
                rhs = self._remove_constant(rhs)
            p, pres = self.pressure_solve(rhs)

        with self.ledger.region("velocity"):
            h1, h2 = nu, b[0] / dt
            M = self._velocity_precon(h1, h2)
            H = lambda x: d.helmholtz(x, h1, h2)  # noqa: E731
            vel, its, resid = [], 0, {}
            for c in range(3):
                with self.ledger.region("rhs"):
                    dp = K.dudxyz(p, J, D, c)
                    r = d.gs_add(K.col3(d.coef.B, K.sub3(F[c], dp)))
                x0 = state.velocity[c]
                if g is not None:
                    x0 = K.add3(K.col3(x0, self.vmask), g[c])
                with self.ledger.region("cg"):
                    res = solve_cg(H, r, x0, M, self.vs, mask=self.vmask, ip=d)
                if not res.converged:
                    raise StepFailure(
                        f"velocity CG ({'uvw'[c]}) did not converge (residual {res.residual:.3e})",
                        {"uvw"[c]: res.residual},
                    )
                its += res.iterations
                resid["uvw"[c]] = res.residual
                vel.append(res.x)
        return vel, p, {"p_iters": pres.iterations, "v_iters": its, "p_res": pres.residual, **resid}

    # -- public ------------------------------------------------------------

    def step(self, state: FluidState) -> FluidState:
        """Advance `state` by one time step in place and return it."""
        d = self.disc
        dt = self.scheme.dt
        with recording(self.ledger), self.ledger.region("step"):
            if not state.ulag:
                state.ulag = [tuple(f.copy() for f in state.velocity)]
            with self.ledger.region("advection"):
                adv = d.advection(*state.ulag[0])
            nlag = [adv] + state.nlag
            k = min(self.scheme.k, len(state.ulag))
            t_new = state.t + dt
            if k == 1 and self.startup == "richardson" and self.scheme.k > 1:
                vel_a, p_a, info = self._substep(state, 1, dt, t_new, state.ulag, nlag)
                half = state.copy()
                vel_h, p_h, info_h = self._substep(half, 1, dt / 2, state.t + dt / 2, state.ulag, nlag)
                half.u, half.v, half.w = vel_h
                lag_h = [tuple(vel_h)]
                adv_h = d.advection(*vel_h)
                vel_b, p_b, info_b = self._substep(half, 1, dt / 2, t_new, lag_h, [adv_h])
                vel = [K.sub3(K.cmult2(fb, 2.0), fa) for fa, fb in zip(vel_a, vel_b)]
                p = K.sub3(K.cmult2(p_b, 2.0), p_a)
                info = {
                    "p_iters": info["p_iters"] + info_h["p_iters"] + info_b["p_iters"],
                    "v_iters": info["v_iters"] + info_h["v_iters"] + info_b["v_iters"],
                }
            else:
                vel, p, info = self._substep(state, k, dt, t_new, state.ulag, nlag)
            with self.ledger.region("divergence"):
                div = d.divergence(*vel)
                info["div"] = d.comm.allreduce(float(np.abs(div).max()), "max")
        _check_finite(zip(("u", "v", "w", "p"), (*vel, p)))
        state.u, state.v, state.w = vel
        state.p = p
        state.ulag = [tuple(vel)] + state.ulag[: self.scheme.k - 1]
        state.nlag = nlag[: self.scheme.k - 1]
        state.t = t_new
        state.n += 1
        info["k"] = k
        state.last = info
        return state


class _Bound:
    """Operator wrapper with a stable identity for projection checks."""

    def __init__(self, fn, key):
        self.fn = fn
        self.key = key

    def __call__(self, x):
        return self.fn(x)


def step(state, scheme, solver: FluidSolver, ledger=None):
    """Functional entry point: advance `state` one step with `solver`."""
    if ledger is not None:
        solver.ledger = ledger
    if scheme != solver.scheme:
        solver.scheme = scheme
    return solver.step(state)
