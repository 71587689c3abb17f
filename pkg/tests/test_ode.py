import csv

import numpy as np
import pytest
from scipy.special import softmax as sp_softmax

from rsdrift.equilibrium import find_equilibrium
from rsdrift.errors import IntegrationError, InvalidArgumentError, RangeError, SingularMatrixError
from rsdrift.model import ModelConfig
from rsdrift.ode import OdeState, integrate, ode_rhs, overlay_error, overlay_error_at, rhs_flat, step_schedule


def dense_rhs(b, s, y, cfg):
    """Kronecker-form drift with every matrix materialized."""
    VW = np.kron(cfg.V, cfg.W)
    IW = np.kron(np.eye(cfg.N), cfg.W)
    theta = np.linalg.solve(s, b)
    p = sp_softmax(cfg.a * (VW.T @ theta).reshape(cfg.N, cfg.K), axis=1).ravel()
    lam_K = np.kron(np.diag(cfg.lam), np.eye(cfg.K))
    lam_q = np.kron(np.diag(cfg.lam), np.eye(cfg.q))
    D = lam_K @ np.diag(p)
    return VW @ D @ IW.T @ y - b, VW @ D @ VW.T - s, lam_q @ (IW @ p - y)


def random_cfg(rng, N, K, p, q, a=3.0):
    lam = rng.dirichlet(np.ones(N))
    lam[-1] = 1.0 - lam[:-1].sum()
    return ModelConfig(V=rng.uniform(-1, 1, (p, N)), W=rng.uniform(-1, 1, (q, K)), lam=lam, a=a, zeta=0.01)


def random_state(rng, cfg):
    A = rng.normal(size=(cfg.pq, cfg.pq))
    return OdeState(rng.normal(size=cfg.pq), A @ A.T / cfg.pq + 0.2 * np.eye(cfg.pq), rng.normal(size=cfg.N * cfg.q))


class TestRhs:
    @pytest.mark.parametrize("dims", [(3, 3, 3, 2), (5, 4, 2, 2), (4, 5, 3, 3), (1, 2, 1, 1), (5, 5, 5, 5)])
    def test_dense_oracle(self, rng, dims):
        cfg = random_cfg(rng, *dims)
        for _ in range(5):
            st = random_state(rng, cfg)
            got = ode_rhs(st, cfg)
            want = dense_rhs(st.b, st.s, st.y, cfg)
            for g, w in zip(got, want):
                np.testing.assert_allclose(g, w, rtol=1e-11, atol=1e-12)

    def test_user_loop_oracle(self, rng):
        cfg = random_cfg(rng, 5, 5, 3, 2)
        st = random_state(rng, cfg)
        theta = np.linalg.solve(st.s, st.b)
        _, _, dy = ode_rhs(st, cfg)
        for n in range(cfg.N):
            logits = [cfg.a * sum(cfg.V[i, n] * cfg.W[j, k] * theta[i * cfg.q + j]
                                  for i in range(cfg.p) for j in range(cfg.q)) for k in range(cfg.K)]
            pn = np.exp(np.array(logits) - max(logits))
            pn /= pn.sum()
            yn = st.y[n * cfg.q:(n + 1) * cfg.q]
            np.testing.assert_allclose(dy[n * cfg.q:(n + 1) * cfg.q], cfg.lam[n] * (cfg.W @ pn - yn), rtol=1e-12)

    def test_single_product(self, rng):
        cfg = ModelConfig(V=np.array([[2.0]]), W=np.array([[0.7]]), lam=[1.0], a=5.0, zeta=0.1)
        for _ in range(5):
            b = rng.normal(size=1)
            _, _, dy = ode_rhs(OdeState(b, np.array([[0.3]]), np.array([1.5])), cfg)
            np.testing.assert_allclose(dy, [0.7 - 1.5])

    def test_zero_at_equilibrium(self, cfg):
        rep = find_equilibrium(cfg, compute_spectrum=False)
        db, ds, dy = ode_rhs(OdeState(rep.b_bar, rep.s_bar, rep.y_bar), cfg)
        assert max(np.abs(db).max(), np.abs(ds).max(), np.abs(dy).max()) <= 1e-10

    def test_singular(self, cfg):
        with pytest.raises(SingularMatrixError):
            ode_rhs(OdeState(np.zeros(6), np.zeros((6, 6)), np.zeros(6)), cfg)

    def test_dimension_check(self, cfg):
        with pytest.raises(InvalidArgumentError):
            ode_rhs(OdeState(np.zeros(5), np.eye(5), np.zeros(6)), cfg)

    def test_flat_matches_structured(self, cfg, rng):
        st = random_state(rng, cfg)
        db, ds, dy = ode_rhs(st, cfg)
        np.testing.assert_array_equal(rhs_flat(st.flat(), cfg), np.concatenate([db, ds.ravel(), dy]))


class TestIntegrate:
    def test_zero_horizon(self, baseline):
        tr = integrate(OdeState.initial(baseline.cfg, baseline.y0()), baseline.cfg, 0.0)
        assert len(tr) == 1
        np.testing.assert_array_equal(tr[0].y, baseline.pop0.Y)

    def test_rk4_refinement(self, baseline):
        cfg = baseline.cfg
        s0 = OdeState.initial(cfg, baseline.y0())
        coarse = integrate(s0, cfg, 10.0, h=0.01).Y[-1]
        fine = integrate(s0, cfg, 10.0, h=0.001).Y[-1]
        assert np.abs(coarse - fine).max() < 1e-6

    def test_euler_first_order(self, baseline):
        cfg = baseline.cfg
        s0 = OdeState.initial(cfg, baseline.y0())
        ref = integrate(s0, cfg, 10.0, h=0.001).Y[-1]
        e1 = np.abs(integrate(s0, cfg, 10.0, h=0.01, method="euler").Y[-1] - ref).max()
        e2 = np.abs(integrate(s0, cfg, 10.0, h=0.001, method="euler").Y[-1] - ref).max()
        assert 5.0 < e1 / e2 < 20.0
        assert e2 < 1e-4

    def test_uniform_steps_option(self, baseline):
        cfg = baseline.cfg
        s0 = OdeState.initial(cfg, baseline.y0())
        tr = integrate(s0, cfg, 0.1, h=0.01, graded_start=False, record_dtau=0.01)
        np.testing.assert_allclose(tr.taus, np.arange(11) * 0.01, atol=1e-12)

    def test_coarse_uniform_start_reports_failure(self, baseline):
        # a 0.1 step straight out of s = zeta I overshoots and breaks positive definiteness
        cfg = baseline.cfg
        with pytest.raises(IntegrationError) as exc:
            integrate(OdeState.initial(cfg, baseline.y0()), cfg, 1.0, h=0.1, graded_start=False)
        assert exc.value.tau == 0.0
        integrate(OdeState.initial(cfg, baseline.y0()), cfg, 1.0, h=0.1)

    def test_records(self, baseline):
        cfg = baseline.cfg
        tr = integrate(OdeState.initial(cfg, baseline.y0()), cfg, 10.0, record_dtau=0.5)
        np.testing.assert_allclose(tr.taus, np.arange(21) * 0.5, atol=1e-12)
        tr = integrate(OdeState.initial(cfg, baseline.y0()), cfg, 1.005, record_dtau=0.5)
        np.testing.assert_allclose(tr.taus, [0.0, 0.5, 1.0, 1.005], atol=1e-12)

    def test_schedule_covers_horizon(self):
        for tau_max in (0.003, 0.2, 1.0, 7.77):
            hs, taus, _ = step_schedule(0.01, tau_max, 1e-3)
            assert hs.sum() == pytest.approx(tau_max, rel=1e-12)
            assert taus[-1] == tau_max
            assert np.all(hs > 0)

    def test_bad_arguments(self, baseline):
        cfg = baseline.cfg
        s0 = OdeState.initial(cfg, baseline.y0())
        with pytest.raises(InvalidArgumentError):
            integrate(s0, cfg, 1.0, h=0.0)
        with pytest.raises(InvalidArgumentError):
            integrate(s0, cfg, 1.0, method="rk45")
        with pytest.raises(InvalidArgumentError):
            integrate(s0, cfg, -1.0)

    def test_indefinite_start(self, cfg):
        bad = OdeState(np.zeros(6), -np.eye(6), np.zeros(6))
        with pytest.raises(IntegrationError) as exc:
            integrate(bad, cfg, 1.0, graded_start=False)
        assert exc.value.tau == 0.0

    def test_s_symmetric_positive_definite(self, baseline):
        cfg = baseline.cfg
        tr = integrate(OdeState.initial(cfg, baseline.y0()), cfg, 50.0, record_dtau=1.0)
        for st in tr:
            assert np.max(np.abs(st.s - st.s.T)) <= 1e-12
            assert np.linalg.eigvalsh(st.s).min() > 0

    def test_box(self, baseline, rng):
        cfg = baseline.cfg
        lo, hi = cfg.W.min(axis=1), cfg.W.max(axis=1)
        y0 = rng.uniform(lo, hi, size=(3, 2))
        tr = integrate(OdeState.initial(cfg, y0), cfg, 200.0, record_dtau=0.5)
        Y = tr.Y.reshape(len(tr), 3, 2)
        assert np.all(Y >= lo - 1e-9) and np.all(Y <= hi + 1e-9)

    def test_baseline_regions(self, baseline):
        # dominant products are fixed over the run
        cfg = baseline.cfg
        tr = integrate(OdeState.initial(cfg, baseline.y0()), cfg, 1000.0)
        dom = np.argmax((tr.Y.reshape(len(tr), 3, 2) @ cfg.W), axis=2)
        assert np.all(dom == dom[0])
        np.testing.assert_array_equal(dom[0], [0, 2, 1])

    def test_csv(self, baseline, tmp_path):
        cfg = baseline.cfg
        tr = integrate(OdeState.initial(cfg, baseline.y0()), cfg, 1.0)
        tr.to_csv(tmp_path / "o.csv")
        rows = list(csv.reader((tmp_path / "o.csv").open()))
        assert rows[0][:3] == ["t", "tau", "loss"]
        assert rows[1][0] == "" and rows[1][2] == ""
        assert len(rows) == 1 + len(tr)


class TestOverlay:
    def test_self_overlay_zero(self, baseline):
        cfg = baseline.cfg
        tr = integrate(OdeState.initial(cfg, baseline.y0()), cfg, 5.0)
        np.testing.assert_array_equal(overlay_error_at(tr.taus, tr.Y, tr), 0.0)

    def test_out_of_range(self, baseline):
        cfg = baseline.cfg
        tr = integrate(OdeState.initial(cfg, baseline.y0()), cfg, 5.0)
        with pytest.raises(RangeError):
            overlay_error_at([6.0], tr.Y[:1], tr)

    def test_dimension_mismatch(self, baseline):
        cfg = baseline.cfg
        tr = integrate(OdeState.initial(cfg, baseline.y0()), cfg, 5.0)
        with pytest.raises(InvalidArgumentError):
            overlay_error_at([1.0], np.zeros((1, 4)), tr)

    def test_baseline_tracking(self, baseline):
        from rsdrift.bandit import run_simulation
        from rsdrift.generic_sa import harmonic_time

        cfg = baseline.cfg
        T = 200_000
        stoch = run_simulation(cfg, baseline.pop0, T - 1, seed=3, record_times=[10**3, 10**4, 10**5, T])
        ode = integrate(OdeState.initial(cfg, baseline.y0()), cfg, harmonic_time(T) - harmonic_time(1),
                        record_dtau=0.01)
        err = overlay_error(stoch, ode)
        assert err[0] == 0.0
        assert err[-1] < err[1]
