"""
semkit: a matrix-free spectral element toolkit.

GLL bases, hexahedral box meshes, gather-scatter over simulated ranks,
matrix-free operators, Krylov solvers with Schwarz and Jacobi
preconditioning, a P_N-P_N Navier-Stokes stepper, and a roofline plus
latency performance model driven by exact kernel cost ledgers.
"""
__version__ = "0.1.0"

from ._accel import USE_NUMBA, set_numba  # noqa: E402,F401
from .basis import Space, gll_rule  # noqa: E402,F401
from .mesh import build_box_mesh, partition_mesh  # noqa: E402,F401
from .operators import Discretization  # noqa: E402,F401
