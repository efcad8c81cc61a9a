"""
Fracture network geometry: planar polygons in 3D, their local frames,
intersection traces and boundary-condition tagging.
"""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GeometryError", "UnsupportedGeometryError", "Expression", "EXPRESSIONS",
    "register_expression", "evaluate", "BoundaryCondition", "Fracture", "Trace",
    "FractureNetwork", "local_frame", "map_to_local", "map_to_global",
    "compute_traces", "trace_sign",
]

PLANE_TOL = 1e-10
POINT_CONTACT_TOL = 1e-8


class GeometryError(ValueError):
    pass


class UnsupportedGeometryError(GeometryError):
    pass


@dataclass(frozen=True)
class Expression:
    """A named analytic field f(points[N, 3]) -> values[N].

    The name is what gets written to network files; the callable is looked
    up in :data:`EXPRESSIONS` when a file is read back.
    """
    name: str
    func: Callable[[np.ndarray], np.ndarray] = field(compare=False, repr=False)

    def __call__(self, points):
        return np.asarray(self.func(np.atleast_2d(points)), dtype=float)


EXPRESSIONS: dict[str, Expression] = {}


def register_expression(name, func):
    expr = Expression(name, func)
    EXPRESSIONS[name] = expr
    return expr


def evaluate(value, points):
    """Evaluate a constant or :class:`Expression` at 3D points."""
    points = np.atleast_2d(points)
    if callable(value):
        return np.broadcast_to(value(points), (len(points),)).astype(float)
    return np.full(len(points), float(value))


@dataclass(frozen=True)
class BoundaryCondition:
    kind: str  # "dirichlet" | "neumann"
    value: float | Expression = 0.0

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise GeometryError(f"unknown boundary condition kind {self.kind!r}")


NEUMANN0 = BoundaryCondition("neumann", 0.0)


def _as_tensor(k):
    k = np.asarray(k, dtype=float)
    if k.ndim == 0:
        return float(k) * np.eye(2)
    if k.shape != (2, 2):
        raise GeometryError(f"transmissivity must be scalar or 2x2, got shape {k.shape}")
    return k


def _newell_normal(v):
    nxt = np.roll(v, -1, axis=0)
    return np.array([
        np.sum((v[:, 1] - nxt[:, 1]) * (v[:, 2] + nxt[:, 2])),
        np.sum((v[:, 2] - nxt[:, 2]) * (v[:, 0] + nxt[:, 0])),
        np.sum((v[:, 0] - nxt[:, 0]) * (v[:, 1] + nxt[:, 1])),
    ])


def _segments_cross(p1, p2, q1, q2, tol):
    """Proper or touching intersection test for 2D segments."""
    d1 = p2 - p1
    d2 = q2 - q1
    den = d1[0] * d2[1] - d1[1] * d2[0]
    r = q1 - p1
    if abs(den) <= tol * max(np.linalg.norm(d1), np.linalg.norm(d2), 1.0):
        # parallel: overlapping collinear segments count as crossing
        if abs(r[0] * d1[1] - r[1] * d1[0]) > tol * max(np.linalg.norm(d1), 1.0):
            return False
        L = d1 @ d1
        t0, t1 = sorted(((q1 - p1) @ d1 / L, (q2 - p1) @ d1 / L))
        return t1 >= -tol and t0 <= 1 + tol
    t = (r[0] * d2[1] - r[1] * d2[0]) / den
    s = (r[0] * d1[1] - r[1] * d1[0]) / den
    return -tol <= t <= 1 + tol and -tol <= s <= 1 + tol


def point_in_polygon(pts, poly, tol=0.0):
    """Even-odd test for 2D points; points within ``tol`` of an edge count as inside."""
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0:1], pts[:, 1:2]
    a = poly
    b = np.roll(poly, -1, axis=0)
    ay, by = a[:, 1], b[:, 1]
    cond = (ay > y) != (by > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = a[:, 0] + (y - ay) * (b[:, 0] - a[:, 0]) / (by - ay)
    inside = (np.sum(cond & (x < xint), axis=1) % 2) == 1
    if tol > 0:
        inside |= distance_to_boundary(pts, poly) <= tol
    return inside


def distance_to_boundary(pts, poly):
    pts = np.atleast_2d(pts)
    a = poly[None, :, :]
    d = (np.roll(poly, -1, axis=0) - poly)[None, :, :]
    p = pts[:, None, :]
    L2 = np.maximum(np.sum(d * d, axis=2), 1e-300)
    t = np.clip(np.sum((p - a) * d, axis=2) / L2, 0.0, 1.0)
    proj = a + t[..., None] * d
    return np.min(np.linalg.norm(p - proj, axis=2), axis=1)


@dataclass(eq=False)
class Fracture:
    """Planar polygonal fracture.

    ``edge_bcs[k]`` applies to the edge from ``vertices[k]`` to
    ``vertices[k + 1]``; untagged edges are homogeneous Neumann.
    ``transmissivity`` is expressed in the local frame of the fracture.
    """
    id: int
    vertices: np.ndarray
    transmissivity: np.ndarray | float = 1.0
    edge_bcs: Sequence[BoundaryCondition | None] = ()
    source: float | Expression = 0.0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise GeometryError("vertices must be an (n, 3) array")
        if len(self.vertices) < 3:
            raise GeometryError("polygon needs >= 3 vertices")
        self.transmissivity = _as_tensor(self.transmissivity)
        k = self.transmissivity
        if not np.allclose(k, k.T) or np.linalg.eigvalsh(0.5 * (k + k.T)).min() <= 0:
            raise GeometryError(f"fracture {self.id}: transmissivity not SPD")
        bcs = list(self.edge_bcs)
        if len(bcs) > len(self.vertices):
            raise GeometryError(f"fracture {self.id}: more BCs than edges")
        bcs += [None] * (len(self.vertices) - len(bcs))
        self.edge_bcs = tuple(NEUMANN0 if bc is None else bc for bc in bcs)
        self._validate()

    def _validate(self):
        origin, basis = self.frame
        n = self.normal
        off = np.abs((self.vertices - origin) @ n)
        if off.max() > PLANE_TOL * self.diameter:
            raise GeometryError(f"fracture {self.id}: vertices not coplanar")
        poly = self.polygon2d
        nv = len(poly)
        tol = 1e-12 * self.diameter
        for a, b in itertools.combinations(range(nv), 2):
            if b == a + 1 or (a == 0 and b == nv - 1):
                continue
            if _segments_cross(poly[a], poly[(a + 1) % nv], poly[b], poly[(b + 1) % nv], tol):
                raise GeometryError(f"fracture {self.id}: polygon is not simple")

    @cached_property
    def diameter(self):
        d = self.vertices[:, None, :] - self.vertices[None, :, :]
        return float(np.sqrt(np.max(np.sum(d * d, axis=2))))

    @cached_property
    def normal(self):
        n = _newell_normal(self.vertices)
        nn = np.linalg.norm(n)
        if nn <= 1e-14 * max(self.diameter, 1e-300) ** 2:
            raise GeometryError(f"fracture {self.id}: degenerate polygon (zero area)")
        return n / nn

    @cached_property
    def frame(self):
        v = self.vertices
        origin = v[0].copy()
        d = np.linalg.norm(v - origin, axis=1)
        j = int(np.argmax(d > 1e-12 * max(self.diameter, 1e-300)))
        if d[j] == 0:
            raise GeometryError(f"fracture {self.id}: degenerate polygon (zero area)")
        e1 = (v[j] - origin) / d[j]
        n = self.normal
        e1 = e1 - (e1 @ n) * n
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return origin, np.vstack([e1, e2])

    @cached_property
    def polygon2d(self):
        origin, basis = self.frame
        return (self.vertices - origin) @ basis.T

    @property
    def area(self):
        p = self.polygon2d
        q = np.roll(p, -1, axis=0)
        return 0.5 * abs(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))

    @property
    def has_dirichlet(self):
        return any(bc.kind == "dirichlet" for bc in self.edge_bcs)

    def with_id(self, new_id):
        return dataclasses.replace(self, id=new_id)


def local_frame(f: Fracture):
    """Origin (first vertex) and two orthonormal in-plane basis vectors (rows)."""
    origin, basis = f.frame
    return origin.copy(), basis.copy()


def map_to_local(f: Fracture, points, tol=None):
    """Map 3D points lying on the fracture plane to local 2D coordinates."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    origin, basis = f.frame
    rel = pts - origin
    tol = PLANE_TOL * f.diameter if tol is None else tol
    off = np.abs(rel @ f.normal)
    if off.max(initial=0.0) > max(tol, 1e-12 * f.diameter):
        raise GeometryError(
            f"fracture {f.id}: point off-plane by {off.max():.3e}")
    loc = rel @ basis.T
    return loc[0] if single else loc


def map_to_global(f: Fracture, local):
    origin, basis = f.frame
    local = np.asarray(local, dtype=float)
    return origin + local @ basis


@dataclass(frozen=True)
class Trace:
    id: int
    endpoints: np.ndarray
    fracture_pair: tuple[int, int]

    def __post_init__(self):
        i, j = self.fracture_pair
        if not i < j:
            raise GeometryError("trace fracture_pair must be strictly increasing")
        if not self.length > 0:
            raise GeometryError("trace has zero length")

    @property
    def length(self):
        return float(np.linalg.norm(self.endpoints[1] - self.endpoints[0]))

    @property
    def direction(self):
        d = self.endpoints[1] - self.endpoints[0]
        return d / np.linalg.norm(d)

    def point_at(self, t):
        """3D points at arc-length parameters ``t`` measured from endpoints[0]."""
        t = np.asarray(t, dtype=float)
        return self.endpoints[0] + t[..., None] * self.direction


def trace_sign(i, trace: Trace):
    """(-1)**chi: -1 on the higher-indexed fracture of the trace, +1 on the lower."""
    lo, hi = trace.fracture_pair
    if i == hi:
        return -1.0
    if i == lo:
        return 1.0
    raise GeometryError(f"fracture {i} does not hold trace {trace.id}")


def _line_intervals(f: Fracture, p0, u):
    """Parameter intervals where the line p0 + t*u lies in the closed polygon."""
    origin, basis = f.frame
    poly = f.polygon2d
    q0 = (p0 - origin) @ basis.T
    v = basis @ u
    v /= np.linalg.norm(v)
    tol = PLANE_TOL * f.diameter
    rel = poly - q0
    s = rel[:, 0] * v[1] - rel[:, 1] * v[0]
    proj = rel @ v
    n = len(poly)
    ts = []
    for k in range(n):
        k1 = (k + 1) % n
        if abs(s[k]) <= tol:
            ts.append(proj[k])
        elif abs(s[k1]) > tol and s[k] * s[k1] < 0:
            w = s[k] / (s[k] - s[k1])
            ts.append(proj[k] + w * (proj[k1] - proj[k]))
    if not ts:
        return []
    merged = []
    for t in np.sort(ts):
        if not merged or t - merged[-1] > tol:
            merged.append(t)
    ts = merged
    if len(ts) == 1:
        return []
    intervals = []
    for a, b in zip(ts[:-1], ts[1:]):
        mid = q0 + 0.5 * (a + b) * v
        if point_in_polygon(mid, poly, tol=tol)[0]:
            if intervals and abs(intervals[-1][1] - a) <= tol:
                intervals[-1][1] = b
            else:
                intervals.append([a, b])
    return intervals


def _coplanar_overlap(fa: Fracture, fb: Fracture):
    pa = fa.polygon2d
    pb = map_to_local(fa, fb.vertices, tol=np.inf)
    tol = 1e-9 * min(fa.diameter, fb.diameter)

    def probes(p):
        mids = 0.5 * (p + np.roll(p, -1, axis=0))
        return np.vstack([p, mids, p.mean(axis=0)])

    def strictly_inside(pts, poly):
        return point_in_polygon(pts, poly) & (distance_to_boundary(pts, poly) > tol)

    if strictly_inside(probes(pb), pa).any() or strictly_inside(probes(pa), pb).any():
        return True
    na, nb = len(pa), len(pb)
    for a in range(na):
        for b in range(nb):
            p1, p2 = pa[a], pa[(a + 1) % na]
            q1, q2 = pb[b], pb[(b + 1) % nb]
            d1, d2 = p2 - p1, q2 - q1
            den = d1[0] * d2[1] - d1[1] * d2[0]
            if abs(den) < 1e-14:
                continue
            r = q1 - p1
            t = (r[0] * d2[1] - r[1] * d2[0]) / den
            s = (r[0] * d1[1] - r[1] * d1[0]) / den
            if 1e-9 < t < 1 - 1e-9 and 1e-9 < s < 1 - 1e-9:
                return True
    return False


def _pair_traces(fa: Fracture, fb: Fracture):
    na, nb = fa.normal, fb.normal
    c = np.cross(na, nb)
    scale = min(fa.diameter, fb.diameter)
    if np.linalg.norm(c) < 1e-12:
        if abs(nb @ (fa.vertices[0] - fb.vertices[0])) <= PLANE_TOL * scale:
            if _coplanar_overlap(fa, fb):
                raise UnsupportedGeometryError(
                    f"fractures {fa.id} and {fb.id} are coplanar and overlap")
        return []
    u = c / np.linalg.norm(c)
    oa, ob = fa.frame[0], fb.frame[0]
    M = np.vstack([na, nb, u])
    rhs = np.array([na @ oa, nb @ ob, u @ (0.5 * (oa + ob))])
    p0 = np.linalg.solve(M, rhs)
    ia = _line_intervals(fa, p0, u)
    ib = _line_intervals(fb, p0, u)
    out = []
    for a0, a1 in ia:
        for b0, b1 in ib:
            t0, t1 = max(a0, b0), min(a1, b1)
            if t1 - t0 > POINT_CONTACT_TOL * scale:
                out.append(np.vstack([p0 + t0 * u, p0 + t1 * u]))
    return out


def _bbox_overlap(fa, fb, pad):
    lo_a, hi_a = fa.vertices.min(0), fa.vertices.max(0)
    lo_b, hi_b = fb.vertices.min(0), fb.vertices.max(0)
    return np.all(lo_a <= hi_b + pad) and np.all(lo_b <= hi_a + pad)


def compute_traces(fractures: Sequence[Fracture]) -> list[Trace]:
    """All segment intersections between pairs of fractures, ordered by pair."""
    segments = []
    for a, b in itertools.combinations(range(len(fractures)), 2):
        fa, fb = fractures[a], fractures[b]
        pad = 1e-9 * max(fa.diameter, fb.diameter)
        if not _bbox_overlap(fa, fb, pad):
            continue
        for seg in _pair_traces(fa, fb):
            segments.append(((fa.id, fb.id) if fa.id < fb.id else (fb.id, fa.id), seg))
    segments.sort(key=lambda s: s[0])
    return [Trace(m, seg, pair) for m, (pair, seg) in enumerate(segments)]


@dataclass(eq=False)
class FractureNetwork:
    """Fractures plus their traces; immutable once built."""
    fractures: list[Fracture]
    traces: list[Trace]
    name: str = "network"

    def __post_init__(self):
        for i, f in enumerate(self.fractures):
            if f.id != i:
                raise GeometryError(f"fracture at position {i} has id {f.id}")
        n = len(self.fractures)
        for t in self.traces:
            i, j = t.fracture_pair
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise GeometryError(f"trace {t.id} references invalid fractures {t.fracture_pair}")
        if not any(f.has_dirichlet for f in self.fractures):
            raise GeometryError("network has no Dirichlet boundary")

    @classmethod
    def from_fractures(cls, fractures, name="network"):
        fractures = list(fractures)
        return cls(fractures, compute_traces(fractures), name=name)

    @cached_property
    def incidence(self):
        inc = [[] for _ in self.fractures]
        for t in self.traces:
            for i in t.fracture_pair:
                inc[i].append(t.id)
        return [tuple(sorted(m)) for m in inc]

    @property
    def diameter(self):
        v = np.vstack([f.vertices for f in self.fractures])
        return float(np.linalg.norm(v.max(0) - v.min(0)))
