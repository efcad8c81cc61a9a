"""
Solvers for the discrete optimisation problem

    min J(lam, psi)  subject to  A h - B lam - C psi = q.

Two routes are provided: a direct solve of the KKT system and a
preconditioned conjugate gradient on the reduced system ``G w + d = 0``
whose operator is applied matrix-free through per-fracture solves.
"""
from __future__ import annotations

import dataclasses
import time
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import GlobalSystem
from .geometry import BoundaryCondition, Expression, FractureNetwork

__all__ = [
    "ConfigError", "LinearAlgebraError", "SingularSystemError", "ControlState",
    "KktSolution", "SolveReport", "ReducedProblem", "solve_kkt_direct",
    "kkt_matrix", "apply_Ghat", "assemble_reduced_rhs", "pcg_solve",
    "build_precond_Pd", "apply_precond_Pf", "PfPreconditioner", "sd_stepsize",
    "rescale_problem", "estimate_scaling_factor", "recover_head",
]

PF_INNER_RTOL = 1e-8
PF_INNER_CAP = 10


class ConfigError(ValueError):
    pass


class LinearAlgebraError(RuntimeError):
    pass


class SingularSystemError(LinearAlgebraError):
    pass


@dataclass
class ControlState:
    lam: np.ndarray
    psi: np.ndarray

    @property
    def w(self):
        return np.concatenate([self.lam, self.psi])

    @classmethod
    def from_w(cls, gs: GlobalSystem, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (gs.n_controls,):
            raise ValueError(f"control vector has shape {w.shape}, expected ({gs.n_controls},)")
        return cls(w[:gs.n_lambda].copy(), w[gs.n_lambda:].copy())


@dataclass
class KktSolution:
    h: np.ndarray
    lam: np.ndarray
    psi: np.ndarray
    p: np.ndarray
    residuals: dict = field(default_factory=dict)

    @property
    def w(self):
        return np.concatenate([self.lam, self.psi])


@dataclass
class SolveReport:
    solver: str
    iterations: int = 0
    converged: bool = False
    residual_history: list = field(default_factory=list)
    functional_history: list = field(default_factory=list)
    functional_value: float = float("nan")
    wall_time: float = 0.0
    preconditioner: str = "none"
    scaling: float = 1.0
    r0_lambda: float = float("nan")
    r0_psi: float = float("nan")
    precond_residual_history: list = field(default_factory=list)
    breakdown: str | None = None
    notes: list = field(default_factory=list)


def _factorize(A, label):
    try:
        lu = spla.splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise LinearAlgebraError(f"{label}: factorisation failed ({exc})") from exc
    return lu


class ReducedProblem:
    """Matrix-free access to the reduced operator, right-hand side and functional.

    The block-diagonal ``A`` is factorised once (its factors are the
    per-fracture factors side by side); every application of the reduced
    operator needs one forward and one adjoint solve per fracture.
    """

    def __init__(self, gs: GlobalSystem):
        self.gs = gs
        try:
            self._lu_all = spla.splu(gs.A, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError:
            # pin down the offending fracture
            for loc in gs.locals:
                _factorize(loc.A, f"fracture {loc.fracture_id}")
            raise LinearAlgebraError("block-diagonal factorisation of A failed")
        self.n_applies = 0

    @cached_property
    def _lu(self):
        return [_factorize(loc.A, f"fracture {loc.fracture_id}") for loc in self.gs.locals]

    @property
    def n(self):
        return self.gs.n_controls

    def solve_A(self, rhs):
        out = self._lu_all.solve(np.ascontiguousarray(rhs, dtype=float))
        if not np.all(np.isfinite(out)):
            for i in range(len(self.gs.locals)):
                if not np.all(np.isfinite(out[self.gs.h_slice(i)])):
                    raise LinearAlgebraError(f"fracture {i}: local solve produced non-finite values")
        return out

    def split(self, w):
        nl = self.gs.n_lambda
        return w[:nl], w[nl:]

    def _gradient(self, w, affine):
        gs = self.gs
        lam, psi = self.split(w)
        Cpsi = gs.C @ psi
        rhs = gs.B @ lam + Cpsi
        if affine:
            rhs = rhs + gs.q
        h = self.solve_A(rhs)
        adj = gs.Gh @ h - Cpsi
        if affine:
            adj = adj + gs.g_dir
        p = self.solve_A(adj)
        top = gs.B.T @ p
        bottom = gs.Gpsi @ psi + gs.C.T @ p - gs.C.T @ h
        if affine:
            bottom = bottom - gs.c_dir
        return np.concatenate([top, bottom]), h, p

    def apply(self, w):
        """Reduced operator times ``w`` (homogeneous data)."""
        self.n_applies += 1
        return self._gradient(np.asarray(w, float), affine=False)[0]

    def residual(self, w):
        """Half gradient of the reduced functional, ``G w + d``."""
        return self._gradient(np.asarray(w, float), affine=True)[0]

    @cached_property
    def _rhs(self):
        gs = self.gs
        hq = self.solve_A(gs.q)
        pq = self.solve_A(gs.Gh @ hq + gs.g_dir)
        d = np.concatenate([gs.B.T @ pq, gs.C.T @ pq - gs.C.T @ hq - gs.c_dir])
        const = float(hq @ (gs.Gh @ hq) + 2.0 * hq @ gs.g_dir + gs.const_dir)
        return d, const, hq

    @property
    def d(self):
        return self._rhs[0]

    @property
    def const(self):
        return self._rhs[1]

    def head(self, w):
        """Free head DOFs h(w) = A^{-1}(B lam + C psi + q)."""
        lam, psi = self.split(np.asarray(w, float))
        gs = self.gs
        return self.solve_A(gs.B @ lam + gs.C @ psi + gs.q)

    def functional(self, w):
        """Reduced functional w.Gw + 2 d.w + const."""
        w = np.asarray(w, float)
        return float(w @ self.apply(w) + 2.0 * self.d @ w + self.const)

    def apply_D(self, lam):
        """B^T A^{-1} G^h A^{-1} B lam."""
        gs = self.gs
        h = self.solve_A(gs.B @ lam)
        return gs.B.T @ self.solve_A(gs.Gh @ h)

    def dense_Ghat(self):
        """Explicit reduced matrix from the columns of A^{-1}B and A^{-1}C (small problems)."""
        gs = self.gs
        X_B = np.column_stack([self.solve_A(gs.B[:, k].toarray().ravel()) for k in range(gs.n_lambda)]) \
            if gs.n_lambda else np.zeros((gs.n_h, 0))
        X_C = np.column_stack([self.solve_A(gs.C[:, k].toarray().ravel()) for k in range(gs.n_psi)]) \
            if gs.n_psi else np.zeros((gs.n_h, 0))
        Gh = gs.Gh.toarray()
        C = gs.C.toarray()
        GXB, GXC = Gh @ X_B, Gh @ X_C
        top = np.hstack([X_B.T @ GXB, X_B.T @ GXC - X_B.T @ C])
        bottom = np.hstack([X_C.T @ GXB - C.T @ X_B,
                            gs.Gpsi.toarray() + X_C.T @ GXC - X_C.T @ C - C.T @ X_C])
        return np.vstack([top, bottom]), X_B, X_C


def apply_Ghat(problem: ReducedProblem, w):
    return problem.apply(w)


def assemble_reduced_rhs(problem: ReducedProblem):
    """(d, const) of the reduced functional."""
    return problem.d.copy(), problem.const


def kkt_matrix(gs: GlobalSystem):
    """Saddle-point matrix for the unknowns [h, lam, psi, -p]."""
    nl, npsi = gs.n_lambda, gs.n_psi
    Z = None
    A, B, C = gs.A, gs.B, gs.C
    return sp.bmat([
        [gs.Gh, Z, -C, A.T],
        [Z, sp.csr_matrix((nl, nl)), Z, -B.T],
        [-C.T, Z, gs.Gpsi if npsi else None, -C.T],
        [A, -B, -C, sp.csr_matrix((gs.n_h, gs.n_h))],
    ], format="csc")


def kkt_rhs(gs: GlobalSystem):
    return np.concatenate([-gs.g_dir, np.zeros(gs.n_lambda), gs.c_dir, gs.q])


def _diagnose(gs):
    for loc in gs.locals:
        try:
            _factorize(loc.A, "")
        except LinearAlgebraError:
            return f"A block of fracture {loc.fracture_id}"
    return "reduced (lambda, psi) block"


def solve_kkt_direct(gs: GlobalSystem) -> KktSolution:
    """Solve the optimality system with a sparse direct factorisation."""
    M = kkt_matrix(gs)
    rhs = kkt_rhs(gs)
    try:
        lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1)
        x = lu.solve(rhs)
    except RuntimeError as exc:
        raise SingularSystemError(f"KKT factorisation failed in the {_diagnose(gs)}: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystemError(f"KKT solution not finite; suspect the {_diagnose(gs)}")
    nh, nl, npsi = gs.n_h, gs.n_lambda, gs.n_psi
    h = x[:nh]
    lam = x[nh:nh + nl]
    psi = x[nh + nl:nh + nl + npsi]
    p = -x[nh + nl + npsi:]
    res = M @ x - rhs
    cuts = np.cumsum([0, nh, nl, npsi, nh])
    scale = max(np.linalg.norm(rhs), 1e-300)
    names = ("head", "lambda", "psi", "constraint")
    residuals = {n: float(np.linalg.norm(res[a:b]) / scale) for n, a, b in zip(names, cuts[:-1], cuts[1:])}
    return KktSolution(h, lam, psi, p, residuals)


class PdPreconditioner:
    """Block-diagonal preconditioner: per-trace blocks of D plus G^psi."""

    def __init__(self, problem: ReducedProblem):
        gs = problem.gs
        self.problem = problem
        self.blocks = []
        self.regularised = []
        for t in gs.network.traces:
            nm = gs.lam_meshes[t.id].dof_count
            Dm = np.zeros((nm, nm))
            for i in t.fracture_pair:
                loc = gs.locals[i]
                Bm = loc.B[:, loc.lam_cols[t.id]].toarray()
                if Bm.shape[0] == 0:
                    continue
                X = problem._lu[i].solve(np.asfortranarray(Bm))
                Dm += X.T @ (loc.Gh @ X)
            Dm = 0.5 * (Dm + Dm.T)
            try:
                fac = sla.cho_factor(Dm)
            except sla.LinAlgError:
                eps = 1e-12 * np.trace(Dm) / nm
                self.regularised.append((t.id, eps))
                fac = sla.cho_factor(Dm + max(eps, 1e-300) * np.eye(nm))
            self.blocks.append((gs.lam_slice(t.id), Dm, fac))
        self._gpsi = spla.splu(sp.csc_matrix(gs.Gpsi)) if gs.n_psi else None

    def __call__(self, r):
        gs = self.problem.gs
        z = np.empty_like(r)
        for sl, _, fac in self.blocks:
            z[sl] = sla.cho_solve(fac, r[sl])
        if self._gpsi is not None:
            z[gs.n_lambda:] = self._gpsi.solve(r[gs.n_lambda:])
        return z

    def dense(self):
        gs = self.problem.gs
        P = np.zeros((gs.n_controls, gs.n_controls))
        for sl, Dm, _ in self.blocks:
            P[sl, sl] = Dm
        P[gs.n_lambda:, gs.n_lambda:] = gs.Gpsi.toarray()
        return P


def build_precond_Pd(problem: ReducedProblem) -> PdPreconditioner:
    return PdPreconditioner(problem)


class PfPreconditioner:
    """diag(D, G^psi) with the D block inverted by an inner matrix-free CG."""

    def __init__(self, problem: ReducedProblem, rtol=PF_INNER_RTOL, cap_factor=PF_INNER_CAP):
        gs = problem.gs
        self.problem = problem
        self.rtol = rtol
        self.maxiter = max(1, cap_factor * gs.n_lambda)
        nl = gs.n_lambda
        self._D = spla.LinearOperator((nl, nl), matvec=problem.apply_D, dtype=float)
        self._gpsi = spla.splu(sp.csc_matrix(gs.Gpsi)) if gs.n_psi else None
        self.inner_iterations = []
        self.cap_hits = 0

    def __call__(self, r):
        gs = self.problem.gs
        nl = gs.n_lambda
        z = np.zeros_like(r)
        rl = r[:nl]
        if nl and np.any(rl):
            count = [0]

            def cb(_):
                count[0] += 1
            zl, info = spla.cg(self._D, rl, rtol=self.rtol, atol=0.0,
                               maxiter=self.maxiter, callback=cb)
            self.inner_iterations.append(count[0])
            if info > 0:
                self.cap_hits += 1
                warnings.warn("P_f inner CG reached its iteration cap", RuntimeWarning, stacklevel=2)
            z[:nl] = zl
        if self._gpsi is not None:
            z[nl:] = self._gpsi.solve(r[nl:])
        return z


def apply_precond_Pf(problem: ReducedProblem, r, pf: PfPreconditioner | None = None):
    pf = pf or PfPreconditioner(problem)
    return pf(np.asarray(r, float))


def make_preconditioner(problem, kind):
    kind = (kind or "none").lower()
    if kind == "none":
        return None
    if kind in ("pd", "p_d"):
        return PdPreconditioner(problem)
    if kind in ("pf", "p_f"):
        return PfPreconditioner(problem)
    raise ConfigError(f"unknown preconditioner {kind!r}")


def pcg_solve(problem: ReducedProblem, precond="none", tol=1e-6, maxit=None, w0=None):
    """Preconditioned conjugate gradient on ``G w + d = 0``.

    Convergence is declared when the unpreconditioned residual satisfies
    ``||G w + d|| <= tol * max(||G w0 + d||, ||d||)``; the recursively updated
    residual is checked against a freshly computed one before stopping.

    Returns
    -------
    (ControlState, SolveReport)
    """
    if not tol > 0:
        raise ConfigError("tol must be positive")
    gs = problem.gs
    n = problem.n
    maxit = 10 * max(n, 1) if maxit is None else int(maxit)
    P = make_preconditioner(problem, precond) if isinstance(precond, str) else precond
    tag = precond if isinstance(precond, str) else type(precond).__name__
    t_start = time.perf_counter()

    w = np.zeros(n) if w0 is None else np.array(w0, dtype=float)
    d = problem.d
    r = problem.residual(w) if np.any(w) else d.copy()
    nl = gs.n_lambda
    report = SolveReport("pcg", preconditioner=tag,
                         r0_lambda=float(np.linalg.norm(r[:nl])),
                         r0_psi=float(np.linalg.norm(r[nl:])))
    ref = max(np.linalg.norm(r), np.linalg.norm(d))
    target = tol * ref
    J = float(w @ (r + d) + problem.const)
    report.residual_history.append(float(np.linalg.norm(r)))
    report.functional_history.append(J)

    k = 0
    while True:
        z = r.copy() if P is None else P(r)
        dw = -z
        rz = r @ z
        report.precond_residual_history.append(float(np.sqrt(abs(rz))))
        while np.linalg.norm(r) > target and k < maxit:
            Gdw = problem.apply(dw)
            den = dw @ Gdw
            if not den > 0:
                report.breakdown = f"indefinite direction at iteration {k} (dw.G.dw = {den:.3e})"
                break
            zeta = rz / den
            J = J + 2.0 * zeta * (r @ dw) + zeta * zeta * den
            w += zeta * dw
            r += zeta * Gdw
            z = r.copy() if P is None else P(r)
            rz_new = r @ z
            report.precond_residual_history.append(float(np.sqrt(abs(rz_new))))
            dw = -z + (rz_new / rz) * dw
            rz = rz_new
            k += 1
            report.residual_history.append(float(np.linalg.norm(r)))
            report.functional_history.append(float(J))
        r_true = problem.residual(w)
        report.residual_history[-1] = float(np.linalg.norm(r_true))
        if np.linalg.norm(r_true) <= target or k >= maxit or report.breakdown:
            break
        r = r_true  # recursive residual drifted; restart from the true one

    report.iterations = k
    report.converged = bool(report.residual_history[-1] <= target and not report.breakdown)
    report.functional_value = problem.functional(w)
    report.wall_time = time.perf_counter() - t_start
    if isinstance(P, PfPreconditioner) and P.cap_hits:
        report.notes.append(f"P_f inner CG hit its cap {P.cap_hits} times")
    if isinstance(P, PdPreconditioner) and P.regularised:
        report.notes.append(f"P_d regularised blocks: {P.regularised}")
    return ControlState.from_w(gs, w), report


def sd_stepsize(problem: ReducedProblem, w, dw):
    """Exact line-search step along ``dw`` for the reduced functional."""
    dw = np.asarray(dw, float)
    if not np.any(dw):
        raise ValueError("search direction is zero")
    den = dw @ problem.apply(dw)
    if not den > 0:
        raise LinearAlgebraError(f"indefinite direction: dw.G.dw = {den:.3e}")
    r = problem.residual(w)
    return float(-(r @ dw) / den)


def _scaled(value, factor):
    if isinstance(value, Expression):
        base = value
        return Expression(f"{base.name}*{factor!r}", lambda x: factor * base(x))
    return factor * float(value)


def rescale_problem(network: FractureNetwork, factor) -> FractureNetwork:
    """Multiply every transmissivity by ``factor``.

    Sources and Neumann data are scaled alongside, so the scaled problem
    has the same hydraulic head and fluxes multiplied by ``factor``.
    """
    if not factor > 0:
        raise ConfigError(f"scaling factor must be positive, got {factor}")
    if factor == 1:
        return network
    fr = []
    for f in network.fractures:
        bcs = [bc if bc.kind == "dirichlet" else BoundaryCondition("neumann", _scaled(bc.value, factor))
               for bc in f.edge_bcs]
        fr.append(dataclasses.replace(f, transmissivity=factor * f.transmissivity,
                                      edge_bcs=bcs, source=_scaled(f.source, factor)))
    return FractureNetwork(fr, list(network.traces), name=network.name)


def estimate_scaling_factor(head_drop, extent, K):
    """Power of ten closest to head_drop / (K * head_drop / extent)."""
    if not (K > 0 and extent > 0):
        raise ConfigError("transmissivity and extent must be positive")
    if not head_drop > 0:
        raise ConfigError("head drop must be positive")
    flux = K * head_drop / extent
    return float(10.0 ** np.round(np.log10(head_drop / flux)))


def recover_head(problem: ReducedProblem, w):
    """Per-fracture nodal heads (Dirichlet values included) for controls ``w``."""
    return problem.gs.full_heads(problem.head(w))
