"""
Convergence on the three-fracture benchmark
===========================================

The built-in three-fracture network has a closed-form head, so errors
can be measured directly. Fracture meshes are refined by a factor of
four in element area at each step; lambda and psi meshes follow the
induced trace partitions.
"""
import numpy as np

from dfnopt import builtin_dfn3, discretize, solve_kkt_direct
from dfnopt.indicators import continuity_indicator, errors_vs_exact

net, exact = builtin_dfn3()
print(f"{len(net.fractures)} fractures, {len(net.traces)} traces")

# %% nonconforming meshes: traces cut through elements
rows = []
for dh in [0.02, 0.005, 0.00125, 0.0003125]:
    gs = discretize(net, dh, dl=0.3, dp=0.5)
    sol = solve_kkt_direct(gs)
    heads = gs.full_heads(sol.h)
    e_l2, e_h1, e_lam = errors_vs_exact(gs, heads, sol.w, exact)
    d_s = continuity_indicator(gs, heads)[0]
    rows.append((dh, gs.n_h, e_l2, e_h1, e_lam, d_s))

print(f"{'dh':>10} {'N_h':>7} {'E_L2':>10} {'E_H1':>10} {'E_lam':>10} {'Delta_S':>10}")
for dh, n, *e in rows:
    print(f"{dh:10.2e} {n:7d} " + " ".join(f"{x:10.3e}" for x in e))

# observed rates against the number of head DOFs (2D: h ~ N^-1/2)
n = np.array([r[1] for r in rows], float)
for k, name in [(2, "L2"), (3, "H1")]:
    e = np.array([r[k] for r in rows])
    print(f"{name} order in h: {-2 * np.polyfit(np.log(n), np.log(e), 1)[0]:.2f}")
