"""
Rescaling a low-transmissivity network
======================================

With K = 1e-7 over a 1000 m box the lambda and psi parts of the reduced
system live on very different scales. Multiplying K by a factor moves
lambda by the same factor and leaves the head untouched, which changes
the balance of the initial residual and the PCG iteration count.
Runs take a few seconds each; pass a smaller MAXIT to shorten them.
"""
import sys

import numpy as np

from dfnopt import ReducedProblem, discretize, estimate_scaling_factor, pcg_solve, rescale_problem
from dfnopt.generator import GeneratorParams, generate_network
from dfnopt.meshing import triangulate_fracture

MAXIT = int(sys.argv[1]) if len(sys.argv) > 1 else 4000

net = generate_network(GeneratorParams(n_fractures=120, extent=1000.0, size_range=(0.1, 0.2),
                                       constant_K=1e-7, seed=1))
print(f"{len(net.fractures)} fractures, {len(net.traces)} traces")
print(f"suggested factor: {estimate_scaling_factor(1.0, 1000.0, 1e-7):.0e}")

# one set of meshes for every factor, so only the scaling differs
dh = 400.0
meshes = [triangulate_fracture(f, dh, "nonconforming", [net.traces[m] for m in net.incidence[i]])
          for i, f in enumerate(net.fractures)]

for k in [1e7, 1e8, 1e9, 1e10, 1e11, 1e12]:
    problem = ReducedProblem(discretize(rescale_problem(net, k), dh, meshes=meshes))
    state, rep = pcg_solve(problem, "none", tol=1e-6, maxit=MAXIT)
    ratio = rep.r0_lambda / rep.r0_psi
    print(f"K={k:.0e}  |r0_lam|/|r0_psi|={ratio:8.3g}  iterations={rep.iterations:5d}"
          f"  converged={rep.converged}")
