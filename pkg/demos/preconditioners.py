"""
Preconditioned conjugate gradient on the 10-fracture sample
===========================================================

Same reduced problem, three preconditioners. P_d inverts small
per-trace blocks once; P_f applies an inner CG solve at every outer
iteration, so it needs fewer but much more expensive iterations.
"""
import time
import warnings

from dfnopt import ReducedProblem, discretize, pcg_solve
from dfnopt.app import RunConfig, load_network
from dfnopt.indicators import continuity_indicator, flux_mismatch

net, _ = load_network(RunConfig(network="builtin:dfn10"))
print(f"{len(net.fractures)} fractures, {len(net.traces)} traces, unit head drop along x")

warnings.simplefilter("ignore")  # P_f reports inner iteration caps
for dh in [0.004, 0.002, 0.001]:
    gs = discretize(net, dh, dl=0.5, dp=0.3)
    problem = ReducedProblem(gs)
    line = [f"dh={dh:<6} N_h={gs.n_h:<6} N_ctrl={gs.n_controls:<5}"]
    for pc in ["none", "pd", "pf"]:
        t0 = time.perf_counter()
        state, rep = pcg_solve(problem, pc, tol=1e-6, maxit=5000)
        line.append(f"{pc}: {rep.iterations:4d} its {time.perf_counter() - t0:5.1f}s")
    heads = gs.full_heads(problem.head(state.w))
    d_io = flux_mismatch(gs, heads, state.w)[0]
    d_s = continuity_indicator(gs, heads)[0]
    print(" | ".join(line) + f" | Delta_in-out {d_io:.2e} Delta_S {d_s:.2e}")
