import numpy as np
import pytest
import scipy.linalg as sla

from dfnopt.assembly import discretize
from dfnopt.optimizer import (ConfigError, ControlState, LinearAlgebraError, PfPreconditioner,
                              ReducedProblem, apply_Ghat, apply_precond_Pf, assemble_reduced_rhs,
                              build_precond_Pd, estimate_scaling_factor, kkt_matrix, kkt_rhs,
                              pcg_solve, recover_head, rescale_problem, sd_stepsize,
                              solve_kkt_direct)

from conftest import cross_pair


def dense_oracle(gs):
    """(G, d, const) of the reduced functional, from dense inverses of A.

    With X = A^{-1} [B C] and h = X w + h_q the functional
    h.Gh.h + 2 h.g_D + psi.Gpsi.psi - 2 h.C.psi - 2 psi.c_D + const_D
    is expanded by hand.
    """
    A = gs.A.toarray()
    Ainv = np.linalg.inv(A)
    X = Ainv @ np.hstack([gs.B.toarray(), gs.C.toarray()])
    hq = Ainv @ gs.q
    Gh, C = gs.Gh.toarray(), gs.C.toarray()
    E = np.hstack([np.zeros((gs.n_psi, gs.n_lambda)), np.eye(gs.n_psi)])
    G = X.T @ Gh @ X + E.T @ gs.Gpsi.toarray() @ E - X.T @ C @ E - E.T @ C.T @ X
    d = X.T @ Gh @ hq + X.T @ gs.g_dir - E.T @ C.T @ hq - E.T @ gs.c_dir
    const = hq @ Gh @ hq + 2 * hq @ gs.g_dir + gs.const_dir
    return G, d, const


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.fixture(scope="module")
def oracle(dfn3_gs):
    return dense_oracle(dfn3_gs)


@pytest.fixture(scope="module")
def kkt(dfn3_gs):
    return solve_kkt_direct(dfn3_gs)


class TestApply:
    def test_zero(self, dfn3_problem):
        assert not np.any(apply_Ghat(dfn3_problem, np.zeros(dfn3_problem.n)))

    def test_dense_oracle(self, dfn3_problem, oracle, rng):
        G, _, _ = oracle
        for _ in range(10):
            w = rng.normal(size=dfn3_problem.n)
            assert rel(apply_Ghat(dfn3_problem, w), G @ w) < 1e-10

    def test_library_dense_matches_oracle(self, dfn3_problem, oracle):
        assert np.abs(dfn3_problem.dense_Ghat()[0] - oracle[0]).max() < 1e-10 * np.abs(oracle[0]).max()

    def test_bt_h_variant_is_wrong(self, dfn3_gs, dfn3_problem, oracle, rng):
        # the alternative first block B^T h does not reproduce the reduced matrix
        gs = dfn3_gs
        w = rng.normal(size=gs.n_controls)
        lam, psi = w[:gs.n_lambda], w[gs.n_lambda:]
        h = dfn3_problem.solve_A(gs.B @ lam + gs.C @ psi)
        wrong = gs.B.T @ h
        assert rel(wrong, (oracle[0] @ w)[:gs.n_lambda]) > 1e-2

    def test_symmetry(self, dfn3_problem, rng):
        for _ in range(5):
            a, b = rng.normal(size=(2, dfn3_problem.n))
            x, y = apply_Ghat(dfn3_problem, a) @ b, a @ apply_Ghat(dfn3_problem, b)
            assert abs(x - y) <= 1e-10 * abs(x)


class TestReducedRhs:
    def test_dense_oracle(self, dfn3_problem, oracle):
        _, d, const = oracle
        d_, c_ = assemble_reduced_rhs(dfn3_problem)
        assert rel(d_, d) < 1e-10
        assert np.isclose(c_, const, rtol=1e-10)

    def test_homogeneous(self):
        gs = discretize(cross_pair(0.0, 0.0), 0.05)
        d, const = assemble_reduced_rhs(ReducedProblem(gs))
        assert not np.any(d) and const == 0.0

    def test_hq_off_traces(self, rng):
        # q = A h~ with h~ zero on every element cut by a trace
        gs = discretize(cross_pair(0.0, 0.0), 0.05)
        parts = []
        for loc in gs.locals:
            h = rng.normal(size=len(loc.mesh.nodes))
            for part in loc.partitions.values():
                h[loc.mesh.triangles[part.triangles].ravel()] = 0.0
            parts.append(h[loc.mesh.free_nodes])
        gs.q = gs.A @ np.concatenate(parts)
        assert np.linalg.norm(gs.q) > 0
        d, const = assemble_reduced_rhs(ReducedProblem(gs))
        assert np.abs(d).max() < 1e-12 and abs(const) < 1e-20

    def test_functional_quadratic_identity(self, dfn3_problem, oracle, rng):
        G, d, const = oracle
        w = rng.normal(size=dfn3_problem.n)
        assert np.isclose(dfn3_problem.functional(w), w @ G @ w + 2 * d @ w + const, rtol=1e-10)


class TestKkt:
    def test_block_residuals(self, kkt):
        assert max(kkt.residuals.values()) <= 1e-10

    def test_full_residual(self, dfn3_gs, kkt):
        x = np.concatenate([kkt.h, kkt.lam, kkt.psi, -kkt.p])
        rhs = kkt_rhs(dfn3_gs)
        assert np.linalg.norm(kkt_matrix(dfn3_gs) @ x - rhs) <= 1e-10 * np.linalg.norm(rhs)

    def test_homogeneous_zero(self):
        sol = solve_kkt_direct(discretize(cross_pair(0.0, 0.0), 0.05))
        assert not np.any(sol.w) and not np.any(sol.h)

    def test_stationary(self, dfn3_problem, kkt):
        r = dfn3_problem.residual(kkt.w)
        assert np.linalg.norm(r) <= 1e-9 * np.linalg.norm(dfn3_problem.d)

    def test_recover_head(self, dfn3_gs, dfn3_problem, kkt):
        h = dfn3_problem.head(kkt.w)
        assert rel(h, kkt.h) < 1e-9
        res = dfn3_gs.constraint_residual(h, kkt.lam, kkt.psi)
        assert np.linalg.norm(res) <= 1e-10 * np.linalg.norm(dfn3_gs.q)
        full = recover_head(dfn3_problem, kkt.w)
        for loc, hf, hi in zip(dfn3_gs.locals, full, dfn3_gs.split_h(h)):
            assert np.array_equal(hf[loc.mesh.free_nodes], hi)

    def test_recover_head_zero(self):
        gs = discretize(cross_pair(0.0, 0.0), 0.05)
        for h in recover_head(ReducedProblem(gs), np.zeros(gs.n_controls)):
            assert not np.any(h)

    def test_minimality(self, dfn3_problem, kkt, rng):
        J0 = dfn3_problem.functional(kkt.w)
        for _ in range(20):
            assert dfn3_problem.functional(kkt.w + 1e-3 * rng.normal(size=dfn3_problem.n)) >= J0


class TestPcg:
    def test_matches_kkt(self, dfn3_problem, kkt):
        state, rep = pcg_solve(dfn3_problem, "none", tol=1e-10)
        assert rep.converged
        assert rel(state.w, kkt.w) < 1e-6

    @pytest.mark.parametrize("precond", ["pd", "pf"])
    def test_preconditioned_match(self, dfn3_problem, kkt, precond):
        state, rep = pcg_solve(dfn3_problem, precond, tol=1e-10)
        assert rep.converged and rel(state.w, kkt.w) < 1e-6

    def test_fixed_point(self, dfn3_problem, kkt):
        _, rep = pcg_solve(dfn3_problem, "none", tol=1e-6, w0=kkt.w)
        assert rep.iterations == 0 and rep.converged

    def test_report(self, dfn3_problem):
        tol = 1e-6
        _, rep = pcg_solve(dfn3_problem, "pd", tol=tol)
        h = np.array(rep.residual_history)
        assert np.all(np.isfinite(h)) and len(h) == rep.iterations + 1
        assert h[-1] <= tol * max(h[0], np.linalg.norm(dfn3_problem.d))
        J = np.array(rep.functional_history)
        assert np.all(np.diff(J) <= 1e-12 * abs(J).max())
        assert len(rep.precond_residual_history) == rep.iterations + 1
        assert rep.r0_lambda > 0 and rep.r0_psi > 0

    def test_maxit_not_converged(self, dfn3_problem):
        _, rep = pcg_solve(dfn3_problem, "none", tol=1e-12, maxit=3)
        assert not rep.converged and rep.iterations == 3

    def test_indefinite_reported(self, dfn3_problem):
        class Neg:
            def __init__(self, p):
                self.gs, self.n, self.d, self.const = p.gs, p.n, p.d, p.const
                self._p = p

            def apply(self, w):
                return -self._p.apply(w)

            def residual(self, w):
                return -self._p.apply(w) + self.d

            def functional(self, w):
                return 0.0
        _, rep = pcg_solve(Neg(dfn3_problem), "none", tol=1e-8)
        assert rep.breakdown and not rep.converged

    def test_bad_tol(self, dfn3_problem):
        with pytest.raises(ConfigError):
            pcg_solve(dfn3_problem, tol=0.0)

    def test_control_state(self, dfn3_gs):
        with pytest.raises(ValueError):
            ControlState.from_w(dfn3_gs, np.zeros(3))


class TestPd:
    def test_blocks_match_dense(self, dfn3_gs, dfn3_problem):
        P = build_precond_Pd(dfn3_problem)
        A = np.linalg.inv(dfn3_gs.A.toarray())
        XB = A @ dfn3_gs.B.toarray()
        D = XB.T @ dfn3_gs.Gh.toarray() @ XB
        for sl, Dm, _ in P.blocks:
            assert np.abs(Dm - D[sl, sl]).max() <= 1e-10 * np.abs(D[sl, sl]).max()

    def test_single_dof_block(self, dfn3):
        net, _ = dfn3
        gs = discretize(net, 0.05, dl=0.01)
        P = ReducedProblem(gs)
        pd = build_precond_Pd(P)
        for t in net.traces:
            assert gs.lam_meshes[t.id].dof_count == 1
            e = np.zeros(gs.n_lambda)
            e[gs.lam_slice(t.id)] = 1.0
            h = P.solve_A(gs.B @ e)
            ref = h @ (gs.Gh @ h)
            Dm = pd.blocks[t.id][1]
            assert Dm.shape == (1, 1) and np.isclose(Dm[0, 0], ref, rtol=1e-12) and ref > 0

    def test_block_locality(self, dfn3_gs, dfn3_problem, rng):
        P = build_precond_Pd(dfn3_problem)
        sl = dfn3_gs.lam_slice(1)
        r = np.zeros(dfn3_gs.n_controls)
        r[sl] = rng.normal(size=sl.stop - sl.start)
        z = P(r)
        mask = np.ones(len(z), bool)
        mask[sl] = False
        assert not np.any(z[mask]) and np.any(z[sl])

    def test_regularises_singular_block(self, dfn3_gs, dfn3_problem, monkeypatch):
        calls = []
        orig = sla.cho_factor

        def flaky(a, *args, **kw):
            if not calls:
                calls.append(1)
                raise sla.LinAlgError("forced")
            return orig(a, *args, **kw)
        monkeypatch.setattr("dfnopt.optimizer.sla.cho_factor", flaky)
        P = build_precond_Pd(dfn3_problem)
        assert len(P.regularised) == 1 and P.regularised[0][1] > 0


class TestPf:
    def test_zero(self, dfn3_problem):
        assert not np.any(apply_precond_Pf(dfn3_problem, np.zeros(dfn3_problem.n)))

    def test_decoupled(self, dfn3_gs, dfn3_problem, rng):
        nl = dfn3_gs.n_lambda
        r = np.zeros(dfn3_gs.n_controls)
        r[nl:] = rng.normal(size=dfn3_gs.n_psi)
        z = apply_precond_Pf(dfn3_problem, r)
        assert not np.any(z[:nl])
        assert np.allclose(z[nl:], np.linalg.solve(dfn3_gs.Gpsi.toarray(), r[nl:]))

    def test_dense(self, dfn3_gs, dfn3_problem, rng):
        gs = dfn3_gs
        A = np.linalg.inv(gs.A.toarray())
        XB = A @ gs.B.toarray()
        D = XB.T @ gs.Gh.toarray() @ XB
        P = sla.block_diag(D, gs.Gpsi.toarray())
        r = rng.normal(size=gs.n_controls)
        assert rel(apply_precond_Pf(dfn3_problem, r), np.linalg.solve(P, r)) < 1e-7

    def test_cap_warning(self, dfn3_problem, rng):
        pf = PfPreconditioner(dfn3_problem, rtol=1e-14, cap_factor=0)
        pf.maxiter = 1
        with pytest.warns(RuntimeWarning):
            pf(rng.normal(size=dfn3_problem.n))
        assert pf.cap_hits == 1


class TestStepsize:
    def test_eigenvector(self, dfn3_problem, oracle, rng):
        G, d, _ = oracle
        mu, V = np.linalg.eigh(G)
        dw = V[:, -1]
        w = rng.normal(size=len(d))
        r = G @ w + d
        assert np.isclose(sd_stepsize(dfn3_problem, w, dw), -(r @ dw) / (mu[-1] * dw @ dw), rtol=1e-8)

    def test_exact_line_search(self, dfn3_problem, rng):
        w, dw = rng.normal(size=(2, dfn3_problem.n))
        z = sd_stepsize(dfn3_problem, w, dw)
        g = dfn3_problem.residual(w + z * dw) @ dw
        assert abs(g) <= 1e-10 * np.linalg.norm(dfn3_problem.residual(w)) * np.linalg.norm(dw)
        J = dfn3_problem.functional
        Jz = J(w + z * dw)
        for s in (1 + 1e-3, 1 - 1e-3):
            assert Jz <= J(w + s * z * dw)

    def test_zero_direction(self, dfn3_problem):
        with pytest.raises(ValueError):
            sd_stepsize(dfn3_problem, np.zeros(dfn3_problem.n), np.zeros(dfn3_problem.n))

    def test_indefinite(self, dfn3_problem, monkeypatch):
        monkeypatch.setattr(dfn3_problem, "apply", lambda w: -w)
        with pytest.raises(LinearAlgebraError):
            sd_stepsize(dfn3_problem, np.zeros(dfn3_problem.n), np.ones(dfn3_problem.n))


class TestNullSpace:
    def test_reduced_hessian_spd(self, dfn3_gs):
        gs = dfn3_gs
        M = kkt_matrix(gs).toarray()
        n = gs.n_h + gs.n_controls
        Gfull = M[:n, :n]
        Ainv = np.linalg.inv(gs.A.toarray())
        Z = np.vstack([Ainv @ np.hstack([gs.B.toarray(), gs.C.toarray()]), np.eye(gs.n_controls)])
        H = Z.T @ Gfull @ Z
        assert np.allclose(H, H.T, atol=1e-12 * np.abs(H).max())
        assert np.linalg.eigvalsh(H).min() > 0


class TestScaling:
    def test_identity(self, dfn3):
        net, _ = dfn3
        assert rescale_problem(net, 1.0) is net

    @pytest.mark.parametrize("k", [0.0, -1.0])
    def test_nonpositive(self, dfn3, k):
        with pytest.raises(ConfigError):
            rescale_problem(dfn3[0], k)

    def test_transmissivity_only_changes(self, dfn3):
        net, _ = dfn3
        s = rescale_problem(net, 1e3)
        for a, b in zip(net.fractures, s.fractures):
            assert np.array_equal(b.transmissivity, 1e3 * a.transmissivity)
            assert np.array_equal(a.vertices, b.vertices)
        assert s.traces == net.traces

    def test_dfn3_equivalence(self, dfn3):
        # heads unchanged and lambda scaled by the factor, both to 1e-8
        net, _ = dfn3
        base = solve_kkt_direct(discretize(net, 0.02))
        scaled = solve_kkt_direct(discretize(rescale_problem(net, 1e3), 0.02))
        assert rel(scaled.lam, 1e3 * base.lam) < 1e-8
        assert rel(scaled.h, base.h) < 1e-8

    def test_head_gap_shrinks_with_mesh(self, dfn3):
        net, _ = dfn3
        gaps = []
        for dh in (0.02, 0.005):
            a = solve_kkt_direct(discretize(net, dh)).h
            b = solve_kkt_direct(discretize(rescale_problem(net, 1e3), dh)).h
            gaps.append(rel(b, a))
        assert gaps[1] < gaps[0]

    def test_estimate_k1e7(self):
        # phi = 1e-10 -> K ~ 1e10 "or slightly less"
        assert estimate_scaling_factor(1.0, 1000.0, 1e-7) == 1e10

    def test_estimate_k1e5(self):
        # phi = 1e-8; the quoted choice 1e7 is one decade under 1 / phi
        assert np.isclose(1e-5 * 1.0 / 1000.0, 1e-8)
        k = estimate_scaling_factor(1.0, 1000.0, 1e-5)
        assert k == 1e8
        assert abs(np.log10(k) - 7) <= 1

    def test_estimate_balanced(self):
        assert estimate_scaling_factor(1.0, 1.0, 1.0) == 1.0

    @pytest.mark.parametrize("args", [(1.0, 0.0, 1.0), (1.0, 1.0, 0.0), (0.0, 1.0, 1.0)])
    def test_estimate_errors(self, args):
        with pytest.raises(ConfigError):
            estimate_scaling_factor(*args)
