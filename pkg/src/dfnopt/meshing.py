"""
Per-fracture triangulations, induced trace partitions and control meshes
on the traces.

Fracture meshes are generated independently of each other. In the default
``nonconforming`` mode the traces play no role in meshing; the
``trace_conforming`` mode makes every trace a chain of element edges.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .geometry import (Fracture, GeometryError, Trace, map_to_local,
                       point_in_polygon, trace_sign)

__all__ = [
    "MeshError", "MeshResourceError", "FractureMesh", "TracePartition",
    "TraceMesh", "triangulate_fracture", "induced_trace_partition",
    "build_trace_mesh", "trace_element_count",
]

MODES = ("nonconforming", "trace_conforming")
DEFAULT_MAX_NODES = 2_000_000
# target lattice triangle area as a fraction of the requested bound
LATTICE_FILL = 0.75


class MeshError(RuntimeError):
    pass


class MeshResourceError(MeshError):
    pass


@dataclass(eq=False)
class FractureMesh:
    fracture_id: int
    nodes: np.ndarray          # (N, 2) local coordinates
    triangles: np.ndarray      # (T, 3) counter-clockwise
    node_edges: np.ndarray     # (N, 2) polygon edges a node lies on, -1 if none
    dirichlet: np.ndarray      # (N,) bool
    max_area: float
    mode: str = "nonconforming"

    def __post_init__(self):
        self.dof_of_node = np.full(len(self.nodes), -1, dtype=np.int64)
        free = np.flatnonzero(~self.dirichlet)
        self.dof_of_node[free] = np.arange(len(free))
        self.free_nodes = free
        self.dirichlet_nodes = np.flatnonzero(self.dirichlet)

    @property
    def n_dofs(self):
        return len(self.free_nodes)

    @cached_property
    def areas(self):
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def edges(self):
        e = np.vstack([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                       self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    @property
    def h(self):
        return float(np.sqrt(2.0 * self.max_area))

    def nodes_on_edges(self, edges):
        edges = np.asarray(list(edges), dtype=np.int64)
        return np.flatnonzero(np.isin(self.node_edges, edges).any(axis=1))

    def edge_node_chain(self, edge, polygon):
        """Nodes on polygon edge ``edge`` ordered from its start vertex."""
        idx = np.flatnonzero((self.node_edges == edge).any(axis=1))
        a = polygon[edge]
        d = polygon[(edge + 1) % len(polygon)] - a
        t = (self.nodes[idx] - a) @ d
        return idx[np.argsort(t, kind="stable")]


@dataclass(eq=False)
class TracePartition:
    """Sub-division of a trace by the element edges of one fracture mesh.

    ``triangles[k]`` is a triangle of the mesh containing the piece
    ``[breakpoints[k], breakpoints[k + 1]]``; ``start``/``direction`` give
    the trace line in local coordinates, parameterised by arc length from
    the trace's first endpoint.
    """
    trace_id: int
    fracture_id: int
    breakpoints: np.ndarray
    triangles: np.ndarray
    start: np.ndarray
    direction: np.ndarray

    @property
    def n_elements(self):
        return len(self.breakpoints) - 1

    @property
    def length(self):
        return float(self.breakpoints[-1])

    def points(self, t):
        t = np.asarray(t, dtype=float)
        return self.start + t[..., None] * self.direction


@dataclass(eq=False)
class TraceMesh:
    trace_id: int
    kind: str  # "lambda" (piecewise constant) | "psi" (continuous piecewise linear)
    breakpoints: np.ndarray

    def __post_init__(self):
        if self.kind not in ("lambda", "psi"):
            raise ValueError(f"unknown trace mesh kind {self.kind!r}")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise MeshError("trace mesh elements must have positive length")

    @property
    def n_elements(self):
        return len(self.breakpoints) - 1

    @property
    def dof_count(self):
        return self.n_elements if self.kind == "lambda" else len(self.breakpoints)

    def locate(self, t):
        """Element index containing each parameter value."""
        k = np.searchsorted(self.breakpoints, t, side="right") - 1
        return np.clip(k, 0, self.n_elements - 1)

    def basis(self, t):
        """(dof indices, values) of the basis functions that are non-zero at ``t``.

        Returns arrays of shape (len(t), 1) for lambda and (len(t), 2) for psi.
        """
        t = np.asarray(t, dtype=float)
        k = self.locate(t)
        if self.kind == "lambda":
            return k[:, None], np.ones((len(t), 1))
        a = self.breakpoints[k]
        b = self.breakpoints[k + 1]
        s = (t - a) / (b - a)
        return np.stack([k, k + 1], axis=1), np.stack([1 - s, s], axis=1)


class _PointSet:
    """Append-only point list with coordinate de-duplication."""

    def __init__(self, scale):
        self.pts = []
        self.edges = []
        self.keys = {}
        self.q = 1e-11 * scale

    def add(self, p, edges=(-1, -1)):
        key = (round(p[0] / self.q), round(p[1] / self.q))
        idx = self.keys.get(key)
        if idx is not None:
            cur = self.edges[idx]
            for e in edges:
                if e >= 0 and e not in cur:
                    cur[cur.index(-1)] = e
            return idx
        self.keys[key] = len(self.pts)
        self.pts.append(np.asarray(p, dtype=float))
        self.edges.append(list(edges))
        return len(self.pts) - 1


def _subdivide(a, b, s):
    n = max(1, int(np.ceil(np.linalg.norm(b - a) / s - 1e-9)))
    return [a + (b - a) * (k / n) for k in range(n + 1)]


def _lattice(poly, s):
    lo = poly.min(axis=0)
    hi = poly.max(axis=0)
    dy = s * np.sqrt(3.0) / 2.0
    rows = np.arange(lo[1], hi[1] + dy, dy)
    out = []
    for r, y in enumerate(rows):
        shift = 0.5 * s if r % 2 else 0.0
        xs = np.arange(lo[0] + shift, hi[0] + s, s)
        out.append(np.column_stack([xs, np.full(len(xs), y)]))
    return np.vstack(out)


def _seg_distance(pts, a, b):
    d = b - a
    L2 = np.maximum(np.sum(d * d, axis=1), 1e-300)
    t = np.clip(np.einsum("pki,ki->pk", pts[:, None, :] - a[None], d) / L2, 0, 1)
    proj = a[None] + t[..., None] * d[None]
    return np.linalg.norm(pts[:, None, :] - proj, axis=2).min(axis=1)


def _trace_segments_local(f: Fracture, traces):
    segs = []
    for t in traces:
        loc = map_to_local(f, t.endpoints, tol=1e-8 * f.diameter)
        segs.append(loc)
    return segs


def _segment_intersection(p1, p2, q1, q2):
    d1 = p2 - p1
    d2 = q2 - q1
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(den) < 1e-14 * (d1 @ d1 + d2 @ d2):
        return None
    r = q1 - p1
    t = (r[0] * d2[1] - r[1] * d2[0]) / den
    s = (r[0] * d1[1] - r[1] * d1[0]) / den
    if -1e-12 <= t <= 1 + 1e-12 and -1e-12 <= s <= 1 + 1e-12:
        return np.clip(t, 0, 1), np.clip(s, 0, 1)
    return None


def triangulate_fracture(f: Fracture, max_area: float, mode: str = "nonconforming",
                         traces=(), max_nodes: int = DEFAULT_MAX_NODES) -> FractureMesh:
    """Triangulate a fracture with every triangle area at most ``max_area``.

    Parameters
    ----------
    f : Fracture
    max_area : float
        Area bound for the elements (delta_h).
    mode : {"nonconforming", "trace_conforming"}
    traces : sequence of Trace
        Traces of ``f``; only used in ``trace_conforming`` mode.
    max_nodes : int
        Refuse to mesh when the estimated node count exceeds this cap.
    """
    if not max_area > 0:
        raise ValueError("max_area must be positive")
    if mode not in MODES:
        raise ValueError(f"unknown mesh mode {mode!r}")
    poly = f.polygon2d
    area = f.area
    est = 2.0 * area / max_area + len(poly)
    if est > max_nodes:
        raise MeshResourceError(
            f"fracture {f.id}: about {est:.3g} nodes requested, cap is {max_nodes}")

    s = np.sqrt(4.0 * LATTICE_FILL * max_area / np.sqrt(3.0))
    nv = len(poly)
    ps = _PointSet(f.diameter)

    tr_segs = _trace_segments_local(f, traces) if mode == "trace_conforming" else []

    # split parameters along polygon edges and along traces
    edge_splits = [[0.0, 1.0] for _ in range(nv)]
    trace_splits = [[0.0, 1.0] for _ in tr_segs]
    for k in range(nv):
        a, b = poly[k], poly[(k + 1) % nv]
        for j, (p, q) in enumerate(tr_segs):
            hit = _segment_intersection(a, b, p, q)
            if hit is not None:
                edge_splits[k].append(hit[0])
                trace_splits[j].append(hit[1])
    for i in range(len(tr_segs)):
        for j in range(i + 1, len(tr_segs)):
            hit = _segment_intersection(*tr_segs[i], *tr_segs[j])
            if hit is not None:
                trace_splits[i].append(hit[0])
                trace_splits[j].append(hit[1])

    segments = []  # (i, j, polygon edge or -1)
    for k in range(nv):
        a, b = poly[k], poly[(k + 1) % nv]
        ts = np.unique(np.round(edge_splits[k], 12))
        chain = []
        for t0, t1 in zip(ts[:-1], ts[1:]):
            pts = _subdivide(a + t0 * (b - a), a + t1 * (b - a), s)
            if chain:
                pts = pts[1:]
            chain += pts
        idx = []
        for n, p in enumerate(chain):
            if n == 0:
                e = (k, (k - 1) % nv)
            elif n == len(chain) - 1:
                e = (k, (k + 1) % nv)
            else:
                e = (k, -1)
            idx.append(ps.add(p, e))
        segments += [(i, j, k) for i, j in zip(idx[:-1], idx[1:])]
    for j, (p, q) in enumerate(tr_segs):
        ts = np.unique(np.round(trace_splits[j], 12))
        chain = []
        for t0, t1 in zip(ts[:-1], ts[1:]):
            pts = _subdivide(p + t0 * (q - p), p + t1 * (q - p), s)
            if chain:
                pts = pts[1:]
            chain += pts
        idx = [ps.add(c) for c in chain]
        segments += [(a, b, -1) for a, b in zip(idx[:-1], idx[1:]) if a != b]

    # interior lattice, kept clear of constrained segments
    lat = _lattice(poly, s)
    inside = point_in_polygon(lat, poly) & (
        _seg_distance(lat, poly, np.roll(poly, -1, axis=0)) > 0.55 * s)
    lat = lat[inside]
    if tr_segs and len(lat):
        ta = np.array([sg[0] for sg in tr_segs])
        tb = np.array([sg[1] for sg in tr_segs])
        lat = lat[_seg_distance(lat, ta, tb) > 0.55 * s]
    for p in lat:
        ps.add(p)

    convex = _is_convex(poly)
    for _ in range(200):
        pts = np.array(ps.pts)
        tri = Delaunay(pts)
        simp = tri.simplices.copy()
        ar = _signed_areas(pts, simp)
        flip = ar < 0
        simp[flip] = simp[flip][:, [0, 2, 1]]
        ar = np.abs(ar)
        keep = ar > 1e-12 * max_area
        if not convex:
            cen = pts[simp].mean(axis=1)
            keep &= point_in_polygon(cen, poly)
        simp, ar = simp[keep], ar[keep]

        edge_set = set(map(tuple, np.sort(np.vstack(
            [simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [2, 0]]]), axis=1).tolist()))
        missing = [sg for sg in segments if (min(sg[:2]), max(sg[:2])) not in edge_set]
        if missing:
            segments = _split_segments(ps, segments, missing)
            continue
        big = np.flatnonzero(ar > max_area)
        if len(big) == 0:
            break
        segments = _refine(ps, segments, pts[simp[big]].mean(axis=1))
        if len(ps.pts) > max_nodes:
            raise MeshResourceError(f"fracture {f.id}: node cap exceeded while refining")
    else:
        raise MeshError(f"fracture {f.id}: mesh refinement did not terminate")

    used = np.unique(simp)
    remap = np.full(len(pts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    nodes = pts[used]
    node_edges = np.array(ps.edges, dtype=np.int64)[used]
    triangles = remap[simp]

    dir_edges = [k for k, bc in enumerate(f.edge_bcs) if bc.kind == "dirichlet"]
    dirichlet = np.isin(node_edges, dir_edges).any(axis=1) if dir_edges else np.zeros(len(nodes), bool)
    return FractureMesh(f.id, nodes, triangles, node_edges, dirichlet,
                        float(ar.max()), mode)


def _signed_areas(pts, simp):
    p = pts[simp]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _is_convex(poly):
    d = np.roll(poly, -1, axis=0) - poly
    cr = d[:, 0] * np.roll(d, -1, axis=0)[:, 1] - d[:, 1] * np.roll(d, -1, axis=0)[:, 0]
    return bool(np.all(cr >= -1e-12 * np.abs(cr).max()) or np.all(cr <= 1e-12 * np.abs(cr).max()))


def _split_segments(ps, segments, to_split):
    split = set((a, b) for a, b, _ in to_split)
    out = []
    for a, b, e in segments:
        if (a, b) in split:
            m = ps.add(0.5 * (ps.pts[a] + ps.pts[b]), (e, -1))
            out += [(a, m, e), (m, b, e)]
        else:
            out.append((a, b, e))
    return out


def _refine(ps, segments, candidates):
    """Insert centroids, splitting any constrained segment they would encroach."""
    seg = np.array([(a, b) for a, b, _ in segments])
    pts = np.array(ps.pts)
    mid = 0.5 * (pts[seg[:, 0]] + pts[seg[:, 1]])
    rad = 0.5 * np.linalg.norm(pts[seg[:, 0]] - pts[seg[:, 1]], axis=1)
    tree = cKDTree(mid)
    hits = tree.query_ball_point(candidates, r=rad.max())
    to_split = set()
    for c, near in zip(candidates, hits):
        enc = [k for k in near if np.linalg.norm(c - mid[k]) < rad[k] * (1 - 1e-9)]
        if enc:
            to_split.update(enc)
        else:
            ps.add(c)
    if to_split:
        segments = _split_segments(ps, segments, [segments[k] for k in sorted(to_split)])
    return segments


def induced_trace_partition(mesh: FractureMesh, fracture: Fracture, trace: Trace) -> TracePartition:
    """Split a trace at its crossings with the element edges of ``mesh``."""
    ends = map_to_local(fracture, trace.endpoints, tol=1e-8 * fracture.diameter)
    L = trace.length
    d = (ends[1] - ends[0]) / np.linalg.norm(ends[1] - ends[0])
    p0 = ends[0]
    tri = mesh.nodes[mesh.triangles]

    lo2 = np.minimum(ends[0], ends[1]) - 1e-12 * L
    hi2 = np.maximum(ends[0], ends[1]) + 1e-12 * L
    cand = np.flatnonzero(np.all(tri.max(axis=1) >= lo2, axis=1) & np.all(tri.min(axis=1) <= hi2, axis=1))
    tri = tri[cand]

    t_lo = np.zeros(len(cand))
    t_hi = np.full(len(cand), L)
    for k in range(3):
        a = tri[:, k]
        e = tri[:, (k + 1) % 3] - a
        elen = np.linalg.norm(e, axis=1)
        # inward half-plane value g(t) = cross(e, p(t) - a) / |e| >= 0; the
        # tolerance only decides whether a parallel edge excludes the line
        g0 = (e[:, 0] * (p0[1] - a[:, 1]) - e[:, 1] * (p0[0] - a[:, 0])) / elen
        g1 = (e[:, 0] * d[1] - e[:, 1] * d[0]) / elen
        tol = 1e-10 * elen
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = -g0 / g1
        pos = g1 > 1e-14
        neg = g1 < -1e-14
        par = ~(pos | neg)
        t_lo = np.where(pos, np.maximum(t_lo, tc), t_lo)
        t_hi = np.where(neg, np.minimum(t_hi, tc), t_hi)
        outside = par & (g0 < -tol)
        t_hi = np.where(outside, -np.inf, t_hi)
    ok = t_hi - t_lo > 1e-10 * L
    t_lo, t_hi, cand = np.clip(t_lo[ok], 0, L), np.clip(t_hi[ok], 0, L), cand[ok]

    bp = np.sort(np.concatenate([[0.0, L], t_lo, t_hi]))
    merged = [bp[0]]
    for t in bp[1:]:
        if t - merged[-1] > 1e-9 * L:
            merged.append(t)
    merged[-1] = L
    bp = np.array(merged)
    bp[0] = 0.0

    mids = 0.5 * (bp[:-1] + bp[1:])
    contains = (t_lo[None, :] <= mids[:, None]) & (mids[:, None] <= t_hi[None, :])
    if not contains.any(axis=1).all():
        raise GeometryError(f"trace {trace.id} leaves the mesh of fracture {fracture.id}")
    owner = cand[np.argmax(contains, axis=1)]
    return TracePartition(trace.id, fracture.id, bp, owner, p0.copy(), d)


def trace_element_count(ratio: float, n_induced: int) -> int:
    """Element count max(1, round(ratio * n_induced)) with halves rounded up."""
    if not (0 < ratio <= 1):
        raise ValueError(f"trace mesh ratio must lie in (0, 1], got {ratio}")
    return max(1, int(np.floor(ratio * n_induced + 0.5)))


def build_trace_mesh(trace: Trace, induced, ratio: float, kind: str) -> TraceMesh:
    """Uniform control mesh on a trace, sized relative to the finer induced partition."""
    n_ind = max(p.n_elements for p in induced)
    n = trace_element_count(ratio, n_ind)
    return TraceMesh(trace.id, kind, np.linspace(0.0, trace.length, n + 1))
