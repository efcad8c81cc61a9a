"""
Stochastic fracture networks in a box.

Square fractures with uniform centres, isotropic normals and uniform
half-widths are clipped to the box. Clipped edges on the inflow face get
a fixed head, those on the outflow face another; everything else is
impervious. The largest connected cluster joining both faces is kept;
failing that, the largest one touching either face.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .geometry import (BoundaryCondition, Fracture, FractureNetwork, GeometryError,
                       compute_traces)

__all__ = ["GeneratorParams", "generate_network", "sample_log10_transmissivity",
           "clip_polygon_to_box"]


@dataclass(frozen=True)
class GeneratorParams:
    n_fractures: int = 20
    extent: float = 1.0
    size_range: tuple = (0.2, 0.4)  # half-width as a fraction of the extent
    log10K_mean: float = -5.0
    log10K_var: float = 1.0 / 3.0
    constant_K: float | None = None
    axis: int = 0                   # flow direction
    head_in: float = 1.0
    head_out: float = 0.0
    min_area_fraction: float = 1e-3
    max_retries: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_fractures < 1:
            raise ValueError("n_fractures must be positive")
        if not self.extent > 0:
            raise ValueError("extent must be positive")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValueError("size_range must satisfy 0 < lo <= hi")
        if self.log10K_var < 0:
            raise ValueError("log10K_var must be non-negative")
        if self.max_retries < 1:
            raise ValueError("max_retries must be positive")


def sample_log10_transmissivity(rng, n, mean=-5.0, var=1.0 / 3.0):
    """log10 K ~ Normal(mean, var)."""
    return rng.normal(mean, np.sqrt(var), size=n)


def clip_polygon_to_box(vertices, lo, hi, tol=1e-12):
    """Clip a planar convex polygon to an axis-aligned box.

    Returns ``(vertices, faces)`` where ``faces[k]`` is the box face code
    ``2*axis + side`` of the edge from vertex k to k+1, or -1.
    """
    poly = [np.asarray(v, float) for v in vertices]
    tags = [-1] * len(poly)
    for axis in range(3):
        for side, (bound, sgn) in enumerate(((lo[axis], 1.0), (hi[axis], -1.0))):
            code = 2 * axis + side
            if not poly:
                return np.zeros((0, 3)), []
            new, new_tags = [], []
            n = len(poly)
            for k in range(n):
                a, b = poly[k], poly[(k + 1) % n]
                da, db = sgn * (a[axis] - bound), sgn * (b[axis] - bound)
                if da >= -tol:
                    new.append(a)
                    new_tags.append(tags[k])
                if (da >= -tol) != (db >= -tol):
                    s = da / (da - db)
                    p = a + s * (b - a)
                    p[axis] = bound
                    new.append(p)
                    # the point entering the inside starts the original edge,
                    # the one leaving starts an edge along the face
                    new_tags.append(tags[k] if da < -tol else code)
            poly, tags = new, new_tags
    if len(poly) < 3:
        return np.zeros((0, 3)), []
    P = np.array(poly)
    # drop duplicate consecutive points
    keep = np.linalg.norm(P - np.roll(P, -1, axis=0), axis=1) > tol * max(1.0, np.ptp(P))
    P = P[keep]
    tags = [t for t, k in zip(tags, keep) if k]
    return P, tags


def _random_square(rng, centre, half):
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    a = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(n, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    th = rng.uniform(0, np.pi / 2)
    u = np.cos(th) * e1 + np.sin(th) * e2
    v = np.cross(n, u)
    return np.array([centre + half * (su * u + sv * v)
                     for su, sv in ((-1, -1), (1, -1), (1, 1), (-1, 1))])


def _candidates(rng, params):
    L = params.extent
    lo, hi = np.zeros(3), np.full(3, L)
    in_code, out_code = 2 * params.axis, 2 * params.axis + 1
    logK = sample_log10_transmissivity(rng, params.n_fractures, params.log10K_mean,
                                       params.log10K_var)
    cand = []
    for k in range(params.n_fractures):
        centre = rng.uniform(0, L, size=3)
        half = rng.uniform(*params.size_range) * L
        verts = _random_square(rng, centre, half)
        P, tags = clip_polygon_to_box(verts, lo, hi)
        if len(P) < 3:
            continue
        bcs = []
        for t in tags:
            if t == in_code:
                bcs.append(BoundaryCondition("dirichlet", params.head_in))
            elif t == out_code:
                bcs.append(BoundaryCondition("dirichlet", params.head_out))
            else:
                bcs.append(None)
        K = params.constant_K if params.constant_K is not None else 10.0 ** logK[k]
        try:
            f = Fracture(len(cand), P, K, bcs)
        except GeometryError:
            continue
        if f.area < params.min_area_fraction * L * L:
            continue
        cand.append(f)
    return cand


def _select_cluster(cand, params):
    """Largest component joining inflow and outflow, else the largest with any fixed head."""
    traces = compute_traces(cand)
    n = len(cand)
    rows = [t.fracture_pair[0] for t in traces]
    cols = [t.fracture_pair[1] for t in traces]
    graph = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    ncomp, labels = connected_components(graph, directed=False)

    def touches(fs, value):
        return any(bc.kind == "dirichlet" and bc.value == value for f in fs for bc in f.edge_bcs)

    spanning, anchored = None, None
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        fs = [cand[i] for i in members]
        t_in, t_out = touches(fs, params.head_in), touches(fs, params.head_out)
        if t_in and t_out and (spanning is None or len(members) > len(spanning)):
            spanning = members
        if (t_in or t_out) and (anchored is None or len(members) > len(anchored)):
            anchored = members
    return spanning if spanning is not None else anchored


def generate_network(params: GeneratorParams, name="generated") -> FractureNetwork:
    """Deterministic random network for a given seed.

    Draws are repeated (continuing the same random stream) until some
    cluster carries a fixed head, at most ``params.max_retries`` times.
    """
    rng = np.random.default_rng(params.seed)
    for _ in range(params.max_retries):
        cand = _candidates(rng, params)
        best = _select_cluster(cand, params) if cand else None
        if best is not None:
            kept = [cand[i].with_id(j) for j, i in enumerate(best)]
            return FractureNetwork.from_fractures(kept, name=name)
    raise GeometryError(f"no fracture cluster reaches a fixed-head face after "
                        f"{params.max_retries} attempts")
