"""
Accuracy and conservation diagnostics of a computed solution.

All functions are pure: they read the discrete system and the control
vector ``w = [lam, psi]`` and never modify them.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .assembly import TRI7, GlobalSystem, _gradients, _trace_quadrature, gauss_legendre
from .geometry import map_to_global

__all__ = [
    "IndicatorReport", "continuity_indicator", "boundary_fluxes", "flux_mismatch",
    "errors_vs_exact", "functional_value", "trace_mismatch", "local_controls",
    "default_flux_edges", "UndefinedIndicatorError", "IndicatorWarning",
]

GAUSS5 = gauss_legendre(5)


class UndefinedIndicatorError(ValueError):
    pass


class IndicatorWarning(UserWarning):
    pass


@dataclass
class IndicatorReport:
    delta_S_h: float = float("nan")
    delta_inout: float = float("nan")
    E_h_L2: float = float("nan")
    E_h_H1: float = float("nan")
    E_lambda_L2: float = float("nan")
    J_value: float = float("nan")
    J_mismatch: float = float("nan")
    h_max: float = float("nan")
    l_tot: float = float("nan")
    phi_in: float = float("nan")
    phi_out: float = float("nan")

    def as_dict(self):
        return dict(self.__dict__)


def local_controls(gs: GlobalSystem, w):
    """Per-fracture local (lam, psi) vectors in the column order of B_i, C_i."""
    w = np.asarray(w, float)
    lam, psi = w[:gs.n_lambda], w[gs.n_lambda:]
    return [(lam[li], psi[pi]) for li, pi in zip(gs.lam_index, gs.psi_index)]


def _eval_on_trace(mesh, tq, h_full):
    return np.einsum("sqk,sk->sq", tq.phi, h_full[tq.nodes])


def continuity_indicator(gs: GlobalSystem, heads, flag=None):
    """sqrt(sum_m ||h_i - h_j||^2_{L2(S_m)}) / (h_max * l_tot).

    ``heads`` are full nodal head vectors per fracture. When every head is
    zero the absolute value is returned and ``flag`` (a list) records it.
    """
    total = 0.0
    l_tot = 0.0
    for t in gs.network.traces:
        i, j = t.fracture_pair
        pi = gs.locals[i].partitions[t.id]
        pj = gs.locals[j].partitions[t.id]
        qi = _trace_quadrature(gs.locals[i].mesh, pi, pj)
        qj = _trace_quadrature(gs.locals[j].mesh, pj, pi)
        diff = _eval_on_trace(None, qi, heads[i]) - _eval_on_trace(None, qj, heads[j])
        total += float(np.sum(qi.w * diff**2))
        l_tot += t.length
    h_max = max(float(np.max(np.abs(h))) if len(h) else 0.0 for h in heads)
    denom = h_max * l_tot
    if denom == 0:
        warnings.warn("h_max is zero; continuity indicator reported unnormalised",
                      IndicatorWarning, stacklevel=2)
        if flag is not None:
            flag.append("absolute")
        denom = 1.0
    return float(np.sqrt(total) / denom), h_max, l_tot


def boundary_fluxes(gs: GlobalSystem, heads, w):
    """Variational outward flux at every Dirichlet node, per fracture.

    Returns a list of (dirichlet node indices, flux values).
    """
    out = []
    for loc, hf, (lam, psi) in zip(gs.locals, heads, local_controls(gs, w)):
        R = loc.A_full @ hf - loc.B_full @ lam - loc.C_full @ psi - loc.f_full
        D = loc.mesh.dirichlet_nodes
        out.append((D, R[D]))
    return out


def default_flux_edges(network):
    """Inflow = Dirichlet edges at the largest constant head, outflow = at the smallest."""
    vals = [(f.id, e, float(bc.value)) for f in network.fractures
            for e, bc in enumerate(f.edge_bcs) if bc.kind == "dirichlet" and not callable(bc.value)]
    if not vals:
        raise UndefinedIndicatorError("no constant Dirichlet edges to classify as inflow/outflow")
    hi = max(v for *_, v in vals)
    lo = min(v for *_, v in vals)
    if hi == lo:
        raise UndefinedIndicatorError("all Dirichlet edges share one head value")
    return ([(i, e) for i, e, v in vals if v == hi], [(i, e) for i, e, v in vals if v == lo])


def _edge_flux(gs, fluxes, edges):
    total = 0.0
    for i, e in edges:
        mesh = gs.locals[i].mesh
        D, R = fluxes[i]
        on = (mesh.node_edges[D] == e).any(axis=1)
        total += float(R[on].sum())
    return total


def flux_mismatch(gs: GlobalSystem, heads, w, inflow=None, outflow=None):
    """|phi_in - phi_out| / phi_in together with (phi_in, phi_out).

    Edge sets are lists of (fracture id, edge index). Nodes shared by an
    inflow and an outflow edge are counted on both sides. Without edge sets
    and without constant heads to classify edges by, every Dirichlet node
    counts as inflow or outflow by the sign of its flux.
    """
    fl = boundary_fluxes(gs, heads, w)
    if inflow is None or outflow is None:
        try:
            inflow, outflow = default_flux_edges(gs.network)
        except UndefinedIndicatorError:
            R = np.concatenate([r for _, r in fl])
            inflow = outflow = None
            phi_in, phi_out = float(R[R > 0].sum()), float(-R[R < 0].sum())
    if inflow is not None:
        phi_in = abs(_edge_flux(gs, fl, inflow))
        phi_out = abs(_edge_flux(gs, fl, outflow))
    if phi_in == 0:
        raise UndefinedIndicatorError("inflow is zero; flux mismatch undefined")
    return abs(phi_in - phi_out) / phi_in, phi_in, phi_out


def errors_vs_exact(gs: GlobalSystem, heads, w, exact):
    """Relative L2 and H1 head errors over all fractures and the L2 error of lambda."""
    if exact is None:
        raise NotImplementedError("no exact solution registered for this network")
    bary, wq = TRI7
    e_l2 = n_l2 = e_h1 = n_h1 = 0.0
    for loc, hf in zip(gs.locals, heads):
        mesh = loc.mesh
        f = gs.network.fractures[loc.fracture_id]
        _, basis = f.frame
        area, grads = _gradients(mesh.nodes, mesh.triangles)
        area = np.abs(area)
        p = mesh.nodes[mesh.triangles]
        qp = np.einsum("qk,tkd->tqd", bary, p)
        X = map_to_global(f, qp.reshape(-1, 2))
        H = exact.head(loc.fracture_id, X).reshape(len(p), -1)
        gH = (exact.gradient(loc.fracture_id, X) @ basis.T).reshape(len(p), -1, 2)
        he = hf[mesh.triangles]
        hq = he @ bary.T
        gh = np.einsum("tk,tkd->td", he, grads)
        aw = area[:, None] * wq[None, :]
        e_l2 += float(np.sum(aw * (hq - H) ** 2))
        n_l2 += float(np.sum(aw * H**2))
        e_h1 += float(np.sum(aw * np.sum((gh[:, None, :] - gH) ** 2, axis=2)))
        n_h1 += float(np.sum(aw * np.sum(gH**2, axis=2)))
    E_l2 = np.sqrt(e_l2 / n_l2)
    E_h1 = np.sqrt((e_l2 + e_h1) / (n_l2 + n_h1))

    lam = np.asarray(w, float)[:gs.n_lambda]
    xg, wg = GAUSS5
    e_lam = n_lam = 0.0
    for t in gs.network.traces:
        lm = gs.lam_meshes[t.id]
        bp = lm.breakpoints
        a, b = bp[:-1], bp[1:]
        tt = a[:, None] + (b - a)[:, None] * xg
        ww = (b - a)[:, None] * wg
        L_ex = exact.flux(t.id, t.point_at(tt.ravel())).reshape(tt.shape)
        L_h = lam[gs.lam_slice(t.id)][:, None]
        e_lam += float(np.sum(ww * (L_h - L_ex) ** 2))
        n_lam += float(np.sum(ww * L_ex**2))
    E_lam = np.sqrt(e_lam / n_lam) if n_lam > 0 else np.sqrt(e_lam)
    return float(E_l2), float(E_h1), float(E_lam)


def functional_value(gs: GlobalSystem, w, heads=None, problem=None):
    """Cost functional h.Gh.h + psi.Gpsi.psi - 2 h.C.psi on full nodal vectors.

    ``heads`` default to the state h(w), which needs ``problem``.
    """
    if heads is None:
        if problem is None:
            from .optimizer import ReducedProblem
            problem = ReducedProblem(gs)
        heads = gs.full_heads(problem.head(w))
    w = np.asarray(w, float)
    psi = w[gs.n_lambda:]
    J = float(psi @ (gs.Gpsi @ psi))
    for loc, hf, (_, psi_i) in zip(gs.locals, heads, local_controls(gs, w)):
        J += float(hf @ (loc.Gh_full @ hf)) - 2.0 * float(hf @ (loc.C_full @ psi_i))
    return J


def trace_mismatch(gs: GlobalSystem, heads, w, rule=GAUSS5):
    """sum_m sum_{i in pair} ||h_i - psi_m||^2_{L2(S_m)} by direct quadrature."""
    psi = np.asarray(w, float)[gs.n_lambda:]
    total = 0.0
    for t in gs.network.traces:
        pm = gs.psi_meshes[t.id]
        psi_m = psi[gs.psi_slice(t.id)]
        for i in t.fracture_pair:
            loc = gs.locals[i]
            tq = _trace_quadrature(loc.mesh, loc.partitions[t.id], pm, rule=rule)
            cols, th = pm.basis(tq.t.ravel())
            pv = np.sum(psi_m[cols] * th, axis=1).reshape(tq.t.shape)
            hv = _eval_on_trace(None, tq, heads[i])
            total += float(np.sum(tq.w * (hv - pv) ** 2))
    return total
