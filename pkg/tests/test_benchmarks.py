import numpy as np
import pytest
import sympy as sp

from dfnopt.benchmarks import DFN3_EXACT, builtin_dfn3, dfn3_fractures
from dfnopt.geometry import EXPRESSIONS, compute_traces

# independent symbolic transcription of the closed-form heads
X, Y, Z = sp.symbols("x y z", real=True)
SYM_HEADS = [
    sp.Rational(1, 10) * (-X - sp.Rational(1, 2)) * (8 * X * Y * (X**2 + Y**2) * sp.atan2(Y, X) + X**3),
    sp.Rational(1, 10) * (-X - sp.Rational(1, 2)) * X**3
    - sp.Rational(4, 5) * sp.pi * (-X - sp.Rational(1, 2)) * X**3 * sp.Abs(Z),
    (Y - 1) * Y * (Y + 1) * (Z - 1) * Z,
]
PLANE_VARS = [(X, Y), (X, Z), (Y, Z)]


def _sample(i, rng, n, margin=0.02):
    """Points on fracture i away from the kinks (y = 0 on F1, z = 0 on F2)."""
    f = dfn3_fractures()[i]
    lo, hi = f.vertices.min(axis=0), f.vertices.max(axis=0)
    p = lo + rng.random((n, 3)) * (hi - lo)
    kink = {0: 1, 1: 2}.get(i)
    if kink is not None:
        p[:, kink] = np.where(np.abs(p[:, kink]) < margin, margin, p[:, kink])
    return p


def _fd_gradient(fun, p, eps=1e-6):
    g = np.zeros_like(p)
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        g[:, k] = (fun(p + e) - fun(p - e)) / (2 * eps)
    return g


@pytest.mark.parametrize("i", [0, 1, 2])
def test_head_matches_symbolic(i, rng):
    p = _sample(i, rng, 50)
    f = sp.lambdify((X, Y, Z), SYM_HEADS[i], "numpy")
    ref = np.broadcast_to(f(p[:, 0], p[:, 1], p[:, 2]), (len(p),))
    assert np.allclose(DFN3_EXACT.head(i, p), ref, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("i", [0, 1, 2])
def test_gradient_against_finite_differences(i, rng):
    p = _sample(i, rng, 100)
    fd = _fd_gradient(lambda q: DFN3_EXACT.head(i, q), p)
    g = DFN3_EXACT.gradient(i, p)
    # tangential components only; normal one is zero by construction
    assert np.allclose(g, fd * (np.abs(dfn3_fractures()[i].normal) < 0.5), atol=1e-6)


@pytest.mark.parametrize("i", [0, 1, 2])
def test_source_is_minus_laplacian(i, rng):
    a, b = PLANE_VARS[i]
    lap = sp.diff(SYM_HEADS[i], a, 2) + sp.diff(SYM_HEADS[i], b, 2)
    # samples avoid the kink, where the delta term is supported
    lap = lap.replace(sp.DiracDelta, lambda *args: 0)
    f = sp.lambdify((X, Y, Z), -lap, "numpy")
    p = _sample(i, rng, 50)
    ref = np.broadcast_to(f(p[:, 0], p[:, 1], p[:, 2]), (len(p),))
    q = EXPRESSIONS[f"dfn3_q{i + 1}"](p)
    assert np.allclose(q, ref, rtol=1e-10, atol=1e-12)


def test_flux_jump_on_s1(rng):
    """lambda on S1 equals minus the jump of the normal derivative, opposite on F2."""
    x = -rng.random(20)
    eps = 1e-6
    pts = np.column_stack([x, np.zeros_like(x), np.zeros_like(x)])

    def one_sided(i, axis, side):
        e = np.zeros(3)
        e[axis] = side * eps
        h = lambda q: DFN3_EXACT.head(i, q)
        # second-order one-sided difference from the chosen side
        return side * (-3 * h(pts + 0 * e) + 4 * h(pts + e) - h(pts + 2 * e)) / (2 * eps)

    jump1 = one_sided(0, 1, +1) - one_sided(0, 1, -1)
    jump2 = one_sided(1, 2, +1) - one_sided(1, 2, -1)
    lam = DFN3_EXACT.flux(0, pts)
    assert np.allclose(lam, -jump1, atol=1e-5)
    assert np.allclose(-lam, -jump2, atol=1e-5)


def test_no_flux_jump_on_s2_s3(rng):
    t = rng.uniform(-1, 1, 20)
    pts = np.column_stack([np.full_like(t, -0.5), t, np.zeros_like(t)])
    assert np.all(DFN3_EXACT.flux(1, pts) == 0)
    assert np.all(DFN3_EXACT.flux(2, pts) == 0)


def test_h3_vanishes_on_y0(rng):
    z = rng.uniform(-1, 1, 30)
    p = np.column_stack([np.full_like(z, -0.5), np.zeros_like(z), z])
    assert np.all(DFN3_EXACT.head(2, p) == 0)


def test_h1_vanishes_on_s2(rng):
    y = rng.uniform(-1, 1, 30)
    p = np.column_stack([np.full_like(y, -0.5), y, np.zeros_like(y)])
    assert np.all(DFN3_EXACT.head(0, p) == 0)
    assert np.all(DFN3_EXACT.head(2, p) == 0)


def test_h3_value():
    # (0.5 - 1)(0.5)(1.5)(0.5 - 1)(0.5) = 0.09375
    assert np.isclose(DFN3_EXACT.head(2, [-0.5, 0.5, 0.5])[0], 0.09375, rtol=0, atol=1e-15)


def test_continuity_on_all_traces(rng):
    fs = dfn3_fractures()
    for t in compute_traces(fs):
        s = rng.random(25)[:, None]
        p = t.endpoints[0] + s * (t.endpoints[1] - t.endpoints[0])
        i, j = t.fracture_pair
        assert np.allclose(DFN3_EXACT.head(i, p), DFN3_EXACT.head(j, p), atol=1e-14)


def test_builtin_dfn3_data():
    net, exact = builtin_dfn3()
    assert exact is DFN3_EXACT
    assert len(net.fractures) == 3 and len(net.traces) == 3
    for f in net.fractures:
        assert np.allclose(f.transmissivity, np.eye(2))
        assert all(bc.kind == "dirichlet" for bc in f.edge_bcs)
