"""
Discrete operators of the three-field optimisation problem.

Per fracture ``i`` and trace ``m`` on it:

* ``A_i``      stiffness + alpha * trace mass of the head basis,
* ``B_i^m``    +/- integral of head basis times lambda basis (piecewise constant),
* ``C_i^m``    alpha * integral of head basis times psi basis (piecewise linear),
* ``G_i^h``    sum over traces of the trace mass of the head basis,
* ``G^psi,m``  1D mass matrix of the psi basis,

and the stacked global forms with ``A h - B lam - C psi = q``.

Dirichlet nodes are eliminated. The lifting enters ``q`` and, because the
cost functional is measured on the full head (Dirichlet values included),
also a few extra vectors ``g_D``, ``c_D`` and a constant.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .geometry import Fracture, FractureNetwork, evaluate, map_to_global, trace_sign
from .meshing import (FractureMesh, TraceMesh, TracePartition, build_trace_mesh,
                      induced_trace_partition, triangulate_fracture)

__all__ = [
    "SingularityWarning", "LocalSystem", "GlobalSystem", "element_stiffness",
    "stiffness_matrix", "load_vector", "assemble_coupling_lambda",
    "assemble_coupling_psi", "assemble_gram_psi", "assemble_gram_h",
    "trace_mass", "assemble_local", "assemble_global", "discretize",
    "GAUSS3", "TRI7", "gauss_legendre",
]


class SingularityWarning(UserWarning):
    pass


def gauss_legendre(n):
    """n-point Gauss rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


GAUSS3 = gauss_legendre(3)

_r15 = np.sqrt(15.0)
_a1, _b1 = (9 - 2 * _r15) / 21, (6 + _r15) / 21
_a2, _b2 = (9 + 2 * _r15) / 21, (6 - _r15) / 21
# degree-5, 7-point rule: barycentric points and weights summing to one
TRI7 = (
    np.array([[1 / 3, 1 / 3, 1 / 3],
              [_a1, _b1, _b1], [_b1, _a1, _b1], [_b1, _b1, _a1],
              [_a2, _b2, _b2], [_b2, _a2, _b2], [_b2, _b2, _a2]]),
    np.array([9 / 40] + [(155 + _r15) / 1200] * 3 + [(155 - _r15) / 1200] * 3),
)


def _gradients(nodes, triangles):
    """Areas (T,) and P1 basis gradients (T, 3, 2)."""
    p = nodes[triangles]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1] / det
    inv[:, 1, 1] = J[:, 0, 0] / det
    inv[:, 0, 1] = -J[:, 0, 1] / det
    inv[:, 1, 0] = -J[:, 1, 0] / det
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    grads = np.einsum("kr,trd->tkd", ref, inv)
    return 0.5 * det, grads


def element_stiffness(coords, K=np.eye(2)):
    """Stiffness matrix of one P1 triangle with vertices ``coords`` (3, 2)."""
    area, g = _gradients(np.asarray(coords, float), np.array([[0, 1, 2]]))
    return area[0] * g[0] @ K @ g[0].T


def stiffness_matrix(mesh: FractureMesh, K):
    area, g = _gradients(mesh.nodes, mesh.triangles)
    ke = area[:, None, None] * np.einsum("tkd,de,tle->tkl", g, K, g)
    return _scatter(mesh.triangles, mesh.triangles, ke, len(mesh.nodes), len(mesh.nodes))


def _scatter(rows, cols, vals, n, m):
    r = np.broadcast_to(rows[:, :, None], vals.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], vals.shape).ravel()
    return sp.csr_matrix((vals.ravel(), (r, c)), shape=(n, m))


def _to3d(f, local_pts):
    return map_to_global(f, local_pts)


def load_vector(mesh: FractureMesh, f: Fracture):
    """Source and Neumann contributions on all mesh nodes."""
    n = len(mesh.nodes)
    out = np.zeros(n)
    src = f.source
    if callable(src) or float(src) != 0.0:
        bary, w = TRI7
        p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
        qp = np.einsum("qk,tkd->tqd", bary, p)
        vals = evaluate(src, _to3d(f, qp.reshape(-1, 2))).reshape(len(p), -1)
        area = np.abs(mesh.areas)
        contrib = area[:, None] * np.einsum("tq,q,qk->tk", vals, w, bary)
        np.add.at(out, mesh.triangles.ravel(), contrib.ravel())
    poly = f.polygon2d
    xg, wg = GAUSS3
    for e, bc in enumerate(f.edge_bcs):
        if bc.kind != "neumann" or (not callable(bc.value) and float(bc.value) == 0.0):
            continue
        chain = mesh.edge_node_chain(e, poly)
        a, b = mesh.nodes[chain[:-1]], mesh.nodes[chain[1:]]
        L = np.linalg.norm(b - a, axis=1)
        pts = a[:, None, :] + xg[None, :, None] * (b - a)[:, None, :]
        g = evaluate(bc.value, _to3d(f, pts.reshape(-1, 2))).reshape(len(a), -1)
        w = L[:, None] * wg[None, :] * g
        np.add.at(out, chain[:-1], (w * (1 - xg)).sum(axis=1))
        np.add.at(out, chain[1:], (w * xg).sum(axis=1))
    return out


def dirichlet_values(mesh: FractureMesh, f: Fracture):
    idx = mesh.dirichlet_nodes
    vals = np.zeros(len(idx))
    if len(idx) == 0:
        return vals
    pts = _to3d(f, mesh.nodes[idx])
    done = np.zeros(len(idx), bool)
    for e, bc in enumerate(f.edge_bcs):
        if bc.kind != "dirichlet":
            continue
        sel = (~done) & (mesh.node_edges[idx] == e).any(axis=1)
        if sel.any():
            vals[sel] = evaluate(bc.value, pts[sel])
            done |= sel
    return vals


@dataclass(eq=False)
class _TraceQuad:
    """Quadrature on the common refinement of a partition and control meshes."""
    t: np.ndarray        # (S, Q) parameters
    w: np.ndarray        # (S, Q) weights (length included)
    nodes: np.ndarray    # (S, 3) head-mesh nodes of the owning triangle
    phi: np.ndarray      # (S, Q, 3) head basis values


def _merge_breaks(*arrays, L):
    bp = np.sort(np.concatenate(arrays))
    out = [0.0]
    for t in bp:
        if t - out[-1] > 1e-9 * L:
            out.append(t)
    out[-1] = L
    return np.array(out)


def _trace_quadrature(mesh: FractureMesh, part: TracePartition, *control, rule=GAUSS3):
    L = part.length
    bp = _merge_breaks(part.breakpoints, *[c.breakpoints for c in control], L=L)
    a, b = bp[:-1], bp[1:]
    xg, wg = rule
    t = a[:, None] + (b - a)[:, None] * xg[None, :]
    w = (b - a)[:, None] * wg[None, :]
    mid = 0.5 * (a + b)
    k = np.clip(np.searchsorted(part.breakpoints, mid, side="right") - 1, 0, part.n_elements - 1)
    tri = mesh.triangles[part.triangles[k]]
    p = mesh.nodes[tri]
    x = part.points(t)
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    rel = x - p[:, None, 0, :]
    lam12 = np.linalg.solve(J[:, None, :, :], rel[..., None])[..., 0]
    phi = np.concatenate([1 - lam12.sum(axis=2, keepdims=True), lam12], axis=2)
    return _TraceQuad(t, w, tri, phi)


def assemble_coupling_lambda(mesh: FractureMesh, part: TracePartition, lam: TraceMesh, sign: float):
    """B_i^m on all mesh nodes: sign * int phi_k eta_l over the trace."""
    tq = _trace_quadrature(mesh, part, lam)
    cols, vals = lam.basis(tq.t.ravel())
    cols = cols.reshape(tq.t.shape)
    S = len(tq.t)
    ent = sign * tq.w[:, :, None] * tq.phi  # (S, Q, 3)
    r = np.broadcast_to(tq.nodes[:, None, :], ent.shape)
    c = np.broadcast_to(cols[:, :, None], ent.shape)
    return sp.csr_matrix((ent.ravel(), (r.ravel(), c.ravel())),
                         shape=(len(mesh.nodes), lam.dof_count))


def assemble_coupling_psi(mesh: FractureMesh, part: TracePartition, psi: TraceMesh, alpha: float):
    """C_i^m on all mesh nodes: alpha * int phi_k theta_l over the trace."""
    tq = _trace_quadrature(mesh, part, psi)
    cols, th = psi.basis(tq.t.ravel())
    S, Q = tq.t.shape
    cols = cols.reshape(S, Q, 2)
    th = th.reshape(S, Q, 2)
    ent = alpha * tq.w[:, :, None, None] * tq.phi[:, :, :, None] * th[:, :, None, :]
    r = np.broadcast_to(tq.nodes[:, None, :, None], ent.shape)
    c = np.broadcast_to(cols[:, :, None, :], ent.shape)
    return sp.csr_matrix((ent.ravel(), (r.ravel(), c.ravel())),
                         shape=(len(mesh.nodes), psi.dof_count))


def assemble_gram_psi(psi: TraceMesh):
    """Exact P1 mass matrix on the psi partition of a trace."""
    h = np.diff(psi.breakpoints)
    n = psi.dof_count
    diag = np.zeros(n)
    diag[:-1] += h / 3
    diag[1:] += h / 3
    off = h / 6
    return sp.diags([off, diag, off], [-1, 0, 1], shape=(n, n), format="csr")


def trace_mass(mesh: FractureMesh, part: TracePartition):
    """G_i^{h,m}: int phi_k phi_l over one trace, on all mesh nodes."""
    tq = _trace_quadrature(mesh, part)
    ent = np.einsum("sq,sqk,sql->skl", tq.w, tq.phi, tq.phi)
    return _scatter(tq.nodes, tq.nodes, ent, len(mesh.nodes), len(mesh.nodes))


def assemble_gram_h(mesh: FractureMesh, partitions):
    n = len(mesh.nodes)
    G = sp.csr_matrix((n, n))
    for part in partitions:
        G = G + trace_mass(mesh, part)
    return G


@dataclass(eq=False)
class LocalSystem:
    """Operators of one fracture restricted to its free (non-Dirichlet) nodes."""
    fracture_id: int
    mesh: FractureMesh
    trace_ids: tuple
    alpha: float
    A: sp.csc_matrix
    B: sp.csr_matrix
    C: sp.csr_matrix
    Gh: sp.csr_matrix
    q: np.ndarray
    dirichlet_values: np.ndarray
    g_dir: np.ndarray            # Gh[free, dir] @ h_D
    c_dir: np.ndarray            # C[dir, :].T @ h_D
    const_dir: float             # h_D Gh[dir, dir] h_D
    lam_cols: dict               # trace id -> slice into local lambda columns
    psi_cols: dict
    partitions: dict             # trace id -> TracePartition
    A_full: sp.csr_matrix = field(repr=False)
    B_full: sp.csr_matrix = field(repr=False)
    C_full: sp.csr_matrix = field(repr=False)
    Gh_full: sp.csr_matrix = field(repr=False)
    f_full: np.ndarray = field(repr=False)

    @property
    def n_dofs(self):
        return self.mesh.n_dofs

    def full_head(self, h_free):
        """Nodal head on all mesh nodes from free DOF values."""
        out = np.empty(len(self.mesh.nodes))
        out[self.mesh.free_nodes] = h_free
        out[self.mesh.dirichlet_nodes] = self.dirichlet_values
        return out


def assemble_local(f: Fracture, mesh: FractureMesh, traces, partitions, lam_meshes,
                   psi_meshes, alpha=1.0) -> LocalSystem:
    """Assemble the constraint operators of one fracture.

    ``traces`` are the traces of ``f`` in increasing id order; the other
    arguments are dicts keyed by trace id.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    n = len(mesh.nodes)
    Kst = stiffness_matrix(mesh, f.transmissivity)
    Gh_full = sp.csr_matrix((n, n))
    Bs, Cs = [], []
    lam_cols, psi_cols = {}, {}
    nl = npsi = 0
    for t in traces:
        part = partitions[t.id]
        Gh_full = Gh_full + trace_mass(mesh, part)
        Bs.append(assemble_coupling_lambda(mesh, part, lam_meshes[t.id], trace_sign(f.id, t)))
        Cs.append(assemble_coupling_psi(mesh, part, psi_meshes[t.id], alpha))
        lam_cols[t.id] = slice(nl, nl + lam_meshes[t.id].dof_count)
        psi_cols[t.id] = slice(npsi, npsi + psi_meshes[t.id].dof_count)
        nl += lam_meshes[t.id].dof_count
        npsi += psi_meshes[t.id].dof_count
    B_full = sp.hstack(Bs, format="csr") if Bs else sp.csr_matrix((n, 0))
    C_full = sp.hstack(Cs, format="csr") if Cs else sp.csr_matrix((n, 0))
    A_full = (Kst + alpha * Gh_full).tocsr()
    f_full = load_vector(mesh, f)

    F, D = mesh.free_nodes, mesh.dirichlet_nodes
    hD = dirichlet_values(mesh, f)
    if len(D) == 0 and alpha == 0:
        warnings.warn(f"fracture {f.id}: alpha = 0 and no Dirichlet boundary, "
                      "A_i is singular", SingularityWarning, stacklevel=2)
    A = A_full[F][:, F].tocsc()
    q = f_full[F] - A_full[F][:, D] @ hD
    Gh = Gh_full[F][:, F].tocsr()
    return LocalSystem(
        fracture_id=f.id, mesh=mesh, trace_ids=tuple(t.id for t in traces), alpha=alpha,
        A=A, B=B_full[F], C=C_full[F], Gh=Gh, q=q, dirichlet_values=hD,
        g_dir=Gh_full[F][:, D] @ hD, c_dir=C_full[D].T @ hD,
        const_dir=float(hD @ (Gh_full[D][:, D] @ hD)),
        lam_cols=lam_cols, psi_cols=psi_cols, partitions=dict(partitions),
        A_full=A_full, B_full=B_full, C_full=C_full, Gh_full=Gh_full, f_full=f_full,
    )


@dataclass(eq=False)
class GlobalSystem:
    """Stacked operators plus the index maps fracture -> DOFs, trace -> controls."""
    network: FractureNetwork
    locals: list
    lam_meshes: dict
    psi_meshes: dict
    alpha: float
    h_offsets: np.ndarray
    lam_offsets: np.ndarray
    psi_offsets: np.ndarray

    @property
    def n_h(self):
        return int(self.h_offsets[-1])

    @property
    def n_lambda(self):
        return int(self.lam_offsets[-1])

    @property
    def n_psi(self):
        return int(self.psi_offsets[-1])

    @property
    def n_controls(self):
        return self.n_lambda + self.n_psi

    def h_slice(self, i):
        return slice(self.h_offsets[i], self.h_offsets[i + 1])

    def lam_slice(self, m):
        return slice(self.lam_offsets[m], self.lam_offsets[m + 1])

    def psi_slice(self, m):
        return slice(self.psi_offsets[m], self.psi_offsets[m + 1])

    def _local_cols(self, loc, kind):
        cols = loc.lam_cols if kind == "lambda" else loc.psi_cols
        sl = self.lam_slice if kind == "lambda" else self.psi_slice
        idx = np.empty(sum(s.stop - s.start for s in cols.values()), dtype=np.int64)
        for m, s in cols.items():
            g = sl(m)
            idx[s] = np.arange(g.start, g.stop)
        return idx

    @cached_property
    def lam_index(self):
        """Global lambda indices of each fracture's local lambda columns."""
        return [self._local_cols(loc, "lambda") for loc in self.locals]

    @cached_property
    def psi_index(self):
        return [self._local_cols(loc, "psi") for loc in self.locals]

    def _stack(self, attr, ncols, index):
        blocks = []
        for loc, idx in zip(self.locals, index):
            M = getattr(loc, attr).tocoo()
            blocks.append(sp.csr_matrix((M.data, (M.row, idx[M.col])), shape=(M.shape[0], ncols)))
        return sp.vstack(blocks, format="csr")

    @cached_property
    def A(self):
        return sp.block_diag([loc.A for loc in self.locals], format="csc")

    @cached_property
    def B(self):
        return self._stack("B", self.n_lambda, self.lam_index)

    @cached_property
    def C(self):
        return self._stack("C", self.n_psi, self.psi_index)

    @cached_property
    def Gh(self):
        return sp.block_diag([loc.Gh for loc in self.locals], format="csr")

    @cached_property
    def Gpsi_blocks(self):
        return [assemble_gram_psi(self.psi_meshes[t.id]) for t in self.network.traces]

    @cached_property
    def Gpsi(self):
        if not self.Gpsi_blocks:
            return sp.csr_matrix((0, 0))
        return (2.0 * sp.block_diag(self.Gpsi_blocks)).tocsr()

    @cached_property
    def q(self):
        return np.concatenate([loc.q for loc in self.locals])

    @cached_property
    def g_dir(self):
        return np.concatenate([loc.g_dir for loc in self.locals])

    @cached_property
    def c_dir(self):
        out = np.zeros(self.n_psi)
        for loc, idx in zip(self.locals, self.psi_index):
            np.add.at(out, idx, loc.c_dir)
        return out

    @cached_property
    def const_dir(self):
        return float(sum(loc.const_dir for loc in self.locals))

    def split_h(self, h):
        return [h[self.h_slice(i)] for i in range(len(self.locals))]

    def full_heads(self, h):
        return [loc.full_head(hi) for loc, hi in zip(self.locals, self.split_h(h))]

    def constraint_residual(self, h, lam, psi):
        return self.A @ h - self.B @ lam - self.C @ psi - self.q


def assemble_global(locals_, network, lam_meshes, psi_meshes, alpha) -> GlobalSystem:
    for i, loc in enumerate(locals_):
        if loc.fracture_id != i or loc.trace_ids != network.incidence[i]:
            raise RuntimeError(f"local system {i} inconsistent with the network index maps")
    h_off = np.concatenate([[0], np.cumsum([loc.n_dofs for loc in locals_])])
    lam_off = np.concatenate([[0], np.cumsum([lam_meshes[t.id].dof_count for t in network.traces])])
    psi_off = np.concatenate([[0], np.cumsum([psi_meshes[t.id].dof_count for t in network.traces])])
    return GlobalSystem(network, list(locals_), dict(lam_meshes), dict(psi_meshes), alpha,
                        h_off.astype(np.int64), lam_off.astype(np.int64), psi_off.astype(np.int64))


def discretize(network: FractureNetwork, dh, dl=0.5, dp=0.3, alpha=1.0,
               mode="nonconforming", max_nodes=None, meshes=None) -> GlobalSystem:
    """Mesh every fracture and trace and assemble the global system.

    ``dh`` may be a scalar or a per-fracture sequence of area bounds.
    Pre-built ``meshes`` (one per fracture) bypass the mesher.
    """
    nf = len(network.fractures)
    dhs = np.broadcast_to(np.asarray(dh, dtype=float), (nf,))
    kw = {} if max_nodes is None else {"max_nodes": max_nodes}
    if meshes is None:
        meshes = [triangulate_fracture(f, dhs[i], mode,
                                       [network.traces[m] for m in network.incidence[i]], **kw)
                  for i, f in enumerate(network.fractures)]
    partitions = [{} for _ in range(nf)]
    lam_meshes, psi_meshes = {}, {}
    for t in network.traces:
        parts = [induced_trace_partition(meshes[i], network.fractures[i], t) for i in t.fracture_pair]
        for i, p in zip(t.fracture_pair, parts):
            partitions[i][t.id] = p
        lam_meshes[t.id] = build_trace_mesh(t, parts, dl, "lambda")
        psi_meshes[t.id] = build_trace_mesh(t, parts, dp, "psi")
    locals_ = [assemble_local(f, meshes[i], [network.traces[m] for m in network.incidence[i]],
                              partitions[i], lam_meshes, psi_meshes, alpha)
               for i, f in enumerate(network.fractures)]
    return assemble_global(locals_, network, lam_meshes, psi_meshes, alpha)
