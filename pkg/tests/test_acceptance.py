"""Acceptance criteria, one test per criterion.

Each test prints a ``[PASS]``/``[FAIL]`` line with its runtime and the
numbers it checked; the lines are repeated at the end of the pytest run.
"""

import time

import numpy as np
import pytest
from scipy.special import softmax as sp_softmax

from rsdrift.bandit import bandit_system, learner_phi, run_simulation
from rsdrift.equilibrium import (
    check_tracking_condition,
    consensus_threshold,
    find_equilibrium,
    polarization_sweep,
    single_user_fixed_points,
)
from rsdrift.experiments import baseline_spec, fig2_spec, fig3b_spec, fig3c_spec, large_n_spec, run_experiment
from rsdrift.generic_sa import estimate_mean_drift, run_sa
from rsdrift.model import LearnerState, softmax
from rsdrift.ode import OdeState, ode_rhs, rhs_flat

RESULTS = {}


class Check:
    def __init__(self, number, title, budget):
        self.number, self.title, self.budget = number, title, budget
        self.notes = []
        self.ok = True

    def expect(self, cond, note):
        self.notes.append(("" if cond else "NOT ") + note)
        self.ok &= bool(cond)

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        if exc_type is not None:
            self.ok = False
            self.notes.append(f"raised {exc_type.__name__}: {exc}")
        self.expect(elapsed < self.budget, f"runtime {elapsed:.1f}s < {self.budget:g}s")
        line = f"[{'PASS' if self.ok else 'FAIL'}] {self.number:>2}. {self.title}: " + "; ".join(self.notes)
        RESULTS[self.number] = line
        print(line)
        return False


def test_01_fig3a_regions():
    with Check(1, "baseline a=8 keeps regions", 10) as c:
        res = run_experiment(baseline_spec())
        s = res.summary()
        c.expect(all(s["dominant_constant"]), f"dominant products constant {s['final_dominant']}")
        pts = res.metrics.simplex_points
        iu = np.triu_indices(3, 1)
        d0, d1 = (float(np.linalg.norm(x[iu[0]] - x[iu[1]], axis=1).sum()) for x in (pts[0], pts[-1]))
        c.expect(d1 < d0, f"simplex distance sum {d0:.4f} -> {d1:.4f}")
    assert c.ok


def test_02_fig3b_consensus():
    with Check(2, "baseline a=4 reaches consensus", 10) as c:
        s = run_experiment(fig3b_spec()).summary()
        c.expect(s["max_pairwise_final"] < 1e-3, f"max pairwise {s['max_pairwise_final']:.2e}")
        c.expect(len(set(s["final_dominant"])) == 1, f"dominant {s['final_dominant']}")
    assert c.ok


def test_03_fig3c_partial_consensus():
    with Check(3, "v_3=[2,3,1.1] merges users 2 and 3", 10) as c:
        s = run_experiment(fig3c_spec()).summary()
        Y = np.array(s["final_y"])
        gap = np.linalg.norm(Y[1] - Y[2])
        c.expect(gap < 1e-3, f"|y_2 - y_3| = {gap:.2e}")
        c.expect(s["final_dominant"][1] == s["final_dominant"][2], f"dominant {s['final_dominant']}")
    assert c.ok


@pytest.mark.slow
def test_04_fig4b_single_product():
    with Check(4, "N=100 hyperplane users pick one product", 300) as c:
        s = run_experiment(large_n_spec(True)).summary()
        freq = s["final_frequency"]
        c.expect(max(freq) == 100 and sum(freq) == 100, f"final frequency {freq}")
    assert c.ok


@pytest.mark.slow
def test_05_overlay_tracking():
    with Check(5, "stochastic run tracks the ODE (5 seeds, T=1e6)", 300) as c:
        spec = fig2_spec()
        for seed in range(5):
            ov = run_experiment(spec, engine="both", seed=seed).overlay
            e3, e6 = ov["error_t1000"], ov["error_t1000000"]
            c.expect(e6 < e3, f"seed {seed}: {e3:.3e} -> {e6:.3e}")
    assert c.ok


def test_06_unique_fixed_point_below_threshold():
    with Check(6, "unique single-user fixed point below threshold", 30) as c:
        rng = np.random.default_rng(6)
        counts = []
        for _ in range(10):
            K = int(rng.integers(2, 5))
            W = rng.normal(size=(2, K))
            a = 0.9 * consensus_threshold(W)
            counts.append(len(single_user_fixed_points(W, a, n_starts=20, tol=1e-9)))
        c.expect(all(n == 1 for n in counts), f"clusters {counts}")
    assert c.ok


def test_07_polarization():
    with Check(7, "W=I_2 polarizes as a grows", 30) as c:
        rows = polarization_sweep(np.eye(2), [1, 10, 100, 1000])
        d = [r.max_stable_distance for r in rows]
        c.expect(d[3] < 0.01, f"distance at a=1000 {d[3]:.2e}")
        c.expect(d[1] >= d[2] >= d[3], "non-increasing from a=10: " + ", ".join(f"{x:.2e}" for x in d))
    assert c.ok


def test_08_equilibrium():
    with Check(8, "baseline equilibrium is tracking and stable", 30) as c:
        cfg = baseline_spec().cfg
        rep = find_equilibrium(cfg)
        db, ds, dy = ode_rhs(OdeState(rep.b_bar, rep.s_bar, rep.y_bar), cfg)
        # recompute the equilibrium relations from theta_bar alone
        VW, IW = np.kron(cfg.V, cfg.W), np.kron(np.eye(cfg.N), cfg.W)
        p = sp_softmax(cfg.a * (VW.T @ rep.theta_bar).reshape(cfg.N, cfg.K), axis=1).ravel()
        D = np.kron(np.diag(cfg.lam), np.eye(cfg.K)) @ np.diag(p)
        s = VW @ D @ VW.T
        theta_check = np.linalg.solve(s, VW @ D @ IW.T @ IW @ p)
        res = max(np.abs(db).max(), np.abs(ds).max(), np.abs(dy).max(), np.abs(theta_check - rep.theta_bar).max())
        c.expect(res < 1e-8, f"independent residual {res:.1e}")
        c.expect(check_tracking_condition(rep, cfg), "tracking condition holds")
        top = float(np.max(rep.spectrum.real))
        c.expect(top <= 1e-6, f"max Re(spectrum) {top:.3e}")
    assert c.ok


def test_09_drift_cross_validation():
    with Check(9, "ODE drift matches Monte-Carlo drift (M=1e6, 20 states)", 120) as c:
        cfg = baseline_spec().cfg
        sys = bandit_system(cfg)
        rng = np.random.default_rng(2024)
        worst, bad = 0.0, 0
        for _ in range(20):
            B = rng.normal(size=6) * 0.5
            A = rng.normal(size=(6, 6))
            S = A @ A.T / 6 + 0.1 * np.eye(6)
            Y = rng.uniform(-1.0, 3.0, 6)
            phi = np.concatenate([B, S.ravel()])
            est = estimate_mean_drift(sys, phi, Y, 10**6, rng)
            diff = np.abs(np.concatenate([est.phi_drift, est.psi_drift]) - rhs_flat(np.concatenate([phi, Y]), cfg))
            bad += int(np.sum(diff > 4 * est.std_err + 1e-12))
            worst = max(worst, float(np.max(diff / np.maximum(est.std_err, 1e-300))))
        c.expect(bad == 0, f"{bad} coordinates outside 4 SE, worst |z| {worst:.2f}")
    assert c.ok


def test_10_structural():
    with Check(10, "structural invariants", 120) as c:
        rng = np.random.default_rng(10)
        logits = np.concatenate([rng.normal(size=(200, 5)) * 10, rng.normal(size=(20, 5)) * 1e3])
        P = softmax(logits)
        c.expect(np.all(P >= 0) and np.abs(P.sum(axis=1) - 1).max() < 1e-12, "softmax normalized")

        spec = baseline_spec()
        cfg = spec.cfg
        min_eig, box_ok, sym = np.inf, True, 0.0
        lo = np.minimum(spec.y0(), cfg.W.min(axis=1))
        hi = np.maximum(spec.y0(), cfg.W.max(axis=1))
        worst_rel = 0.0
        for seed in range(3):
            traj = run_simulation(cfg, spec.pop0, 10_000, record_every=100, seed=seed, keep_events=True)
            for S in traj.S:
                sym = max(sym, np.abs(S - S.T).max())
                min_eig = min(min_eig, np.linalg.eigvalsh(S).min())
            Y = traj.Y.reshape(len(traj.Y), cfg.N, cfg.q)
            box_ok &= bool(np.all(Y >= lo - 1e-12) and np.all(Y <= hi + 1e-12))
            G = cfg.contexts
            C = np.array([G[e.U, e.A] for e in traj.events])
            acc = cfg.zeta * np.eye(cfg.pq) + np.cumsum(C[:, :, None] * C[:, None, :], axis=0)[traj.times[1:] - 2]
            closed = acc / traj.times[1:, None, None]
            rel = np.linalg.norm(traj.S[1:] - closed, axis=(1, 2)) / np.linalg.norm(closed, axis=(1, 2))
            worst_rel = max(worst_rel, float(rel.max()))
        c.expect(min_eig > 0 and sym <= 1e-12, f"S symmetric positive definite (min eig {min_eig:.2e})")
        c.expect(box_ok, "Y stays in the attribute box")
        c.expect(worst_rel <= 1e-10, f"closed-form S rel err {worst_rel:.1e}")

        same = True
        for seed in (0, 42, 2**40 + 3):
            a = run_simulation(cfg, spec.pop0, 2000, record_every=1, seed=seed)
            b = run_sa(bandit_system(cfg), learner_phi(LearnerState.initial(cfg)), spec.pop0.Y, T=2000,
                       record_every=1, seed=seed, t0=1)
            phi, psi = np.asarray(b.phi), np.asarray(b.psi)
            same &= bool(np.array_equal(a.B, phi[:, :6]) and np.array_equal(a.S.reshape(-1, 36), phi[:, 6:])
                         and np.array_equal(a.Y, psi))
        c.expect(same, "generic and bandit runs bit-identical")
    assert c.ok
