"""
Text formats: DFN network files, flat config files, legacy VTK and CSV.

Network file::

    dfn 1
    fracture 0 K 1 0 1
    v -1 -1 0
    v 0.5 -1 0
    v 0.5 1 0
    bc 0 dirichlet 1.0
    bc 1 neumann expr:my_flux
    source 0.0

Blank lines and ``#`` comments are ignored. ``expr:NAME`` refers to a
field registered with :func:`dfnopt.geometry.register_expression`;
``expr:NAME*F`` is that field times the number ``F``.
"""
from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .geometry import (EXPRESSIONS, BoundaryCondition, Expression, Fracture,
                       FractureNetwork, GeometryError, map_to_global)

__all__ = ["ParseError", "parse_network", "read_network", "serialize_network",
           "write_network", "parse_config", "read_config", "write_vtk", "write_vtm",
           "write_csv", "format_float"]


class ParseError(ValueError):
    def __init__(self, message, line=None, column=None):
        self.line, self.column = line, column
        loc = "" if line is None else f"line {line}" + ("" if column is None else f", column {column}")
        super().__init__(f"{loc}: {message}" if loc else message)


def format_float(x):
    return repr(float(x)) if np.isfinite(x) else str(float(x))


def _format_value(v):
    if isinstance(v, Expression):
        return f"expr:{v.name}"
    return format_float(v)


def _parse_value(tok, line, col):
    if tok.startswith("expr:"):
        name = tok[5:]
        factor = None
        if "*" in name:
            name, *fs = name.split("*")
            try:
                factor = float(np.prod([float(f) for f in fs]))
            except ValueError:
                raise ParseError(f"bad expression factor in {tok!r}", line, col) from None
        if name not in EXPRESSIONS:
            raise ParseError(f"unknown expression {name!r}", line, col)
        e = EXPRESSIONS[name]
        if factor is None:
            return e
        return Expression(f"{name}*{factor!r}", lambda x, e=e, k=factor: k * e(x))
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"expected a number or expr:NAME, got {tok!r}", line, col) from None


def _floats(toks, n, line, what):
    if len(toks) != n:
        raise ParseError(f"{what} expects {n} numbers, got {len(toks)}", line)
    try:
        return [float(t) for t in toks]
    except ValueError as exc:
        raise ParseError(f"{what}: {exc}", line) from None


def parse_network(text, name="network") -> FractureNetwork:
    """Parse the DFN text format; traces are computed from the geometry."""
    blocks = []
    cur = None
    seen_header = False
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        key = toks[0]
        if not seen_header:
            if key != "dfn" or toks[1:] != ["1"]:
                raise ParseError("expected header 'dfn 1'", ln, 1)
            seen_header = True
            continue
        if key == "name":
            name = " ".join(toks[1:])
        elif key == "fracture":
            if len(toks) not in (2, 6) or (len(toks) == 6 and toks[2] != "K"):
                raise ParseError("expected 'fracture <id> K <k11> <k12> <k22>'", ln)
            try:
                fid = int(toks[1])
            except ValueError:
                raise ParseError(f"bad fracture id {toks[1]!r}", ln, raw.find(toks[1]) + 1) from None
            k = _floats(toks[3:], 3, ln, "K") if len(toks) == 6 else [1.0, 0.0, 1.0]
            cur = {"id": fid, "K": np.array([[k[0], k[1]], [k[1], k[2]]]), "v": [],
                   "bc": {}, "source": 0.0, "line": ln}
            blocks.append(cur)
        elif cur is None:
            raise ParseError(f"{key!r} outside a fracture block", ln, 1)
        elif key == "v":
            cur["v"].append(_floats(toks[1:], 3, ln, "vertex"))
        elif key == "bc":
            if len(toks) != 4:
                raise ParseError("expected 'bc <edge> dirichlet|neumann <value>'", ln)
            try:
                e = int(toks[1])
            except ValueError:
                raise ParseError(f"bad edge index {toks[1]!r}", ln, raw.find(toks[1]) + 1) from None
            if toks[2] not in ("dirichlet", "neumann"):
                raise ParseError(f"unknown boundary condition tag {toks[2]!r}", ln, raw.find(toks[2]) + 1)
            cur["bc"][e] = (toks[2], _parse_value(toks[3], ln, raw.find(toks[3]) + 1), ln)
        elif key == "source":
            if len(toks) != 2:
                raise ParseError("expected 'source <value>'", ln)
            cur["source"] = _parse_value(toks[1], ln, raw.find(toks[1]) + 1)
        else:
            raise ParseError(f"unknown keyword {key!r}", ln, 1)
    if not blocks:
        raise ParseError("no fractures")
    fractures = []
    for pos, b in enumerate(blocks):
        ln = b["line"]
        if b["id"] != pos:
            raise ParseError(f"fracture ids must be 0..n-1 in order, got {b['id']}", ln)
        nv = len(b["v"])
        if nv < 3:
            raise ParseError("polygon needs ≥ 3 vertices", ln)
        bcs = [None] * nv
        for e, (kind, val, bl) in b["bc"].items():
            if not 0 <= e < nv:
                raise ParseError(f"edge index {e} out of range 0..{nv - 1}", bl)
            bcs[e] = BoundaryCondition(kind, val)
        try:
            fractures.append(Fracture(b["id"], np.array(b["v"]), b["K"], bcs, b["source"]))
        except GeometryError as exc:
            raise ParseError(str(exc), ln) from None
    try:
        return FractureNetwork.from_fractures(fractures, name=name)
    except GeometryError as exc:
        raise ParseError(str(exc)) from None


def read_network(path) -> FractureNetwork:
    path = Path(path)
    return parse_network(path.read_text(), name=path.stem)


def serialize_network(network: FractureNetwork) -> str:
    out = ["dfn 1", f"name {network.name}"]
    for f in network.fractures:
        K = f.transmissivity
        out.append(f"fracture {f.id} K {format_float(K[0, 0])} {format_float(K[0, 1])} {format_float(K[1, 1])}")
        for v in f.vertices:
            out.append("v " + " ".join(format_float(c) for c in v))
        for e, bc in enumerate(f.edge_bcs):
            if bc.kind == "neumann" and not callable(bc.value) and float(bc.value) == 0.0:
                continue
            out.append(f"bc {e} {bc.kind} {_format_value(bc.value)}")
        if callable(f.source) or float(f.source) != 0.0:
            out.append(f"source {_format_value(f.source)}")
    return "\n".join(out) + "\n"


def write_network(network, path):
    Path(path).write_text(serialize_network(network))


def parse_config(text) -> dict:
    """Flat ``key = value`` pairs; values stay strings."""
    cfg = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", ln)
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ParseError("empty key", ln, 1)
        cfg[k] = v
    return cfg


def read_config(path) -> dict:
    return parse_config(Path(path).read_text())


def write_vtk(path, fracture: Fracture, mesh, head, title=None):
    """Legacy ASCII unstructured grid of one fracture with the nodal head."""
    pts = map_to_global(fracture, mesh.nodes)
    tri = mesh.triangles
    head = np.asarray(head, float)
    if len(head) != len(pts):
        raise ValueError("head must have one value per mesh node")
    lines = ["# vtk DataFile Version 3.0", title or f"fracture {fracture.id}", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {len(pts)} double"]
    lines += [" ".join(format_float(c) for c in p) for p in pts]
    lines.append(f"CELLS {len(tri)} {4 * len(tri)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in tri]
    lines.append(f"CELL_TYPES {len(tri)}")
    lines += ["5"] * len(tri)
    lines += [f"POINT_DATA {len(pts)}", "SCALARS head double 1", "LOOKUP_TABLE default"]
    lines += [format_float(h) for h in head]
    Path(path).write_text("\n".join(lines) + "\n")


def write_vtm(path, files):
    """Multiblock index pointing at per-fracture VTK files."""
    path = Path(path)
    rows = ['<?xml version="1.0"?>',
            '<VTKFile type="vtkMultiBlockDataSet" version="1.0">',
            "  <vtkMultiBlockDataSet>"]
    for i, f in enumerate(files):
        rel = os.path.relpath(f, path.parent)
        rows.append(f'    <DataSet index="{i}" name="fracture_{i}" file="{rel}"/>')
    rows += ["  </vtkMultiBlockDataSet>", "</VTKFile>"]
    path.write_text("\n".join(rows) + "\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([format_float(x) if isinstance(x, (float, np.floating)) else x for x in r])
