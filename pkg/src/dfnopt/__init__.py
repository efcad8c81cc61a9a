"""Flow in discrete fracture networks by PDE-constrained optimisation on nonconforming meshes."""
from . import benchmarks  # registers the built-in analytic fields
from .assembly import GlobalSystem, discretize
from .benchmarks import builtin_dfn3
from .geometry import (BoundaryCondition, Expression, Fracture, FractureNetwork, Trace,
                       compute_traces, register_expression)
from .optimizer import (ReducedProblem, estimate_scaling_factor, pcg_solve,
                        rescale_problem, solve_kkt_direct)

__version__ = "0.1.0"
