"""
Built-in benchmark networks.

``builtin_dfn3`` is a three-fracture network with a closed-form head.
All analytic fields take 3D points of shape (N, 3).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import (BoundaryCondition, EXPRESSIONS, Fracture, FractureNetwork,
                       register_expression)

__all__ = ["ExactSolution", "builtin_dfn3", "dfn3_fractures", "DFN3_TRACE_ENDPOINTS"]

PI = np.pi


def _h1(p):
    x, y = p[:, 0], p[:, 1]
    return 0.1 * (-x - 0.5) * (8 * x * y * (x**2 + y**2) * np.arctan2(y, x) + x**3)


def _h2(p):
    x, z = p[:, 0], p[:, 2]
    return 0.1 * (-x - 0.5) * x**3 - 0.8 * PI * (-x - 0.5) * x**3 * np.abs(z)


def _h3(p):
    y, z = p[:, 1], p[:, 2]
    return (y - 1) * y * (y + 1) * (z - 1) * z


def _lap1(p):
    x, y = p[:, 0], p[:, 1]
    at = np.arctan2(y, x)
    return (-8 * x**3 / 5 - 2 * x**2 + 16 * x * y**2 / 5 - 3 * x / 10 + 4 * y**2 / 5
            + (-72 * x**2 * y / 5 - 24 * x * y / 5 - 8 * y**3 / 5) * at)


def _lap2(p):
    x, z = p[:, 0], p[:, 2]
    return -6 * x**2 / 5 - 3 * x / 10 + (48 * PI * x**2 / 5 + 12 * PI * x / 5) * np.abs(z)


def _lap3(p):
    y, z = p[:, 1], p[:, 2]
    return 2 * y**3 + 6 * y * z**2 - 6 * y * z - 2 * y


def _grad1(p):
    x, y = p[:, 0], p[:, 1]
    at = np.arctan2(y, x)
    gx = (-2 * x**3 / 5 + 4 * x**2 * y**2 / 5 - 3 * x**2 / 20 + 2 * x * y**2 / 5
          + (-16 * x**3 * y / 5 - 6 * x**2 * y / 5 - 8 * x * y**3 / 5 - 2 * y**3 / 5) * at)
    gy = (-4 * x**3 * y / 5 - 2 * x**2 * y / 5
          + (-4 * x**4 / 5 - 2 * x**3 / 5 - 12 * x**2 * y**2 / 5 - 6 * x * y**2 / 5) * at)
    return np.column_stack([gx, gy, np.zeros_like(x)])


def _grad2(p):
    x, z = p[:, 0], p[:, 2]
    # d/dx [c(x) (1/10 - 4 pi |z| / 5)] with c = (-x - 1/2) x^3
    dc = -4 * x**3 - 1.5 * x**2
    c = (-x - 0.5) * x**3
    gx = dc * (0.1 - 0.8 * PI * np.abs(z))
    gz = -0.8 * PI * c * np.sign(z)
    return np.column_stack([gx, np.zeros_like(x), gz])


def _grad3(p):
    y, z = p[:, 1], p[:, 2]
    gy = (3 * y**2 - 1) * (z**2 - z)
    gz = (y**3 - y) * (2 * z - 1)
    return np.column_stack([np.zeros_like(y), gy, gz])


def _lam_s1(p):
    # source entering F1 across S1; F2 receives the opposite
    x = p[:, 0]
    return -1.6 * PI * (-x - 0.5) * x**3


def _zero(p):
    return np.zeros(len(p))


for _name, _f in [("dfn3_h1", _h1), ("dfn3_h2", _h2), ("dfn3_h3", _h3),
                  ("dfn3_q1", lambda p: -_lap1(p)), ("dfn3_q2", lambda p: -_lap2(p)),
                  ("dfn3_q3", lambda p: -_lap3(p))]:
    register_expression(_name, _f)

DFN3_TRACE_ENDPOINTS = [
    ((-1.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
    ((-0.5, -1.0, 0.0), (-0.5, 1.0, 0.0)),
    ((-0.5, 0.0, -1.0), (-0.5, 0.0, 1.0)),
]


@dataclass(frozen=True)
class ExactSolution:
    """Closed-form head, its gradient and the trace flux jumps of a network."""
    heads: tuple
    gradients: tuple
    fluxes: tuple  # per trace; value of lambda seen by the lower-index fracture

    def head(self, i, points):
        return self.heads[i](np.atleast_2d(points))

    def gradient(self, i, points):
        return self.gradients[i](np.atleast_2d(points))

    def flux(self, m, points):
        return self.fluxes[m](np.atleast_2d(points))


DFN3_EXACT = ExactSolution((_h1, _h2, _h3), (_grad1, _grad2, _grad3), (_lam_s1, _zero, _zero))


def dfn3_fractures():
    verts = [
        [(-1, -1, 0), (0.5, -1, 0), (0.5, 1, 0), (-1, 1, 0)],
        [(-1, 0, -1), (0, 0, -1), (0, 0, 1), (-1, 0, 1)],
        [(-0.5, -1, -1), (-0.5, 1, -1), (-0.5, 1, 1), (-0.5, -1, 1)],
    ]
    out = []
    for i, v in enumerate(verts):
        bc = BoundaryCondition("dirichlet", EXPRESSIONS[f"dfn3_h{i + 1}"])
        out.append(Fracture(i, np.array(v, float), 1.0, [bc] * 4, EXPRESSIONS[f"dfn3_q{i + 1}"]))
    return out


def builtin_dfn3() -> tuple[FractureNetwork, ExactSolution]:
    """Three-fracture network with known head, unit transmissivity, Dirichlet data everywhere."""
    return FractureNetwork.from_fractures(dfn3_fractures(), name="dfn3"), DFN3_EXACT
