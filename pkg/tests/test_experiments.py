import json
import math

import numpy as np
import pytest

from rsdrift.errors import ConfigError, InvalidArgumentError
from rsdrift.experiments import (
    CORNERS,
    FIGURES,
    apply_overrides,
    baseline_spec,
    compute_metrics,
    dominant_product,
    fig2_spec,
    fig3b_spec,
    fig3c_spec,
    get_spec,
    large_n_spec,
    pairwise_distances,
    preference_frequency,
    preference_spread,
    run_experiment,
    simplex_coordinates,
    user_preference_matrix,
    user_preferences_of_products,
    write_artifacts,
)
from rsdrift.generic_sa import harmonic_time
from rsdrift.model import ModelConfig


@pytest.fixture(scope="module")
def fig3a():
    return run_experiment(baseline_spec())


class TestSimplex:
    def test_corners(self):
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            np.testing.assert_allclose(simplex_coordinates(e), CORNERS[k], atol=1e-15)

    def test_centroid(self):
        np.testing.assert_allclose(simplex_coordinates(np.full(3, 1 / 3)), [0.5, math.sqrt(3) / 6], atol=1e-15)

    def test_product_point(self, cfg):
        # softmax(8 W^T w_2) mapped to the plane, computed at 30 digits
        pts = user_preferences_of_products(cfg) @ CORNERS
        np.testing.assert_allclose(pts[1], [0.86891634562221207, 0.075681183141375724], rtol=1e-12)

    def test_inside_triangle(self, rng):
        for _ in range(20):
            x, y = simplex_coordinates(rng.dirichlet(np.ones(3)))
            assert y >= -1e-12 and y <= math.sqrt(3) * x + 1e-12 and y <= math.sqrt(3) * (1 - x) + 1e-12

    def test_bad_input(self):
        with pytest.raises(InvalidArgumentError):
            simplex_coordinates([0.5, 0.5])
        with pytest.raises(InvalidArgumentError):
            simplex_coordinates([0.5, 0.6, -0.1])
        with pytest.raises(InvalidArgumentError):
            simplex_coordinates([0.2, 0.2, 0.2])


class TestDominant:
    def test_labels(self):
        assert dominant_product([0.1, 0.7, 0.2]) == 2
        assert dominant_product([1.0]) == 1

    def test_tie_goes_low(self):
        assert dominant_product([0.4, 0.4, 0.2]) == 1
        assert dominant_product([0.2, 0.4, 0.4]) == 2

    def test_matches_attribute_score(self, cfg, rng):
        # softmax is monotone, so the dominant product maximizes w_k . y
        for _ in range(20):
            y = rng.normal(size=cfg.N * cfg.q)
            P = user_preference_matrix(y, cfg)
            scores = y.reshape(cfg.N, cfg.q) @ cfg.W
            for n in range(cfg.N):
                assert dominant_product(P[n]) == int(np.argmax(scores[n])) + 1


class TestMetrics:
    def test_pairwise(self, rng):
        y = rng.normal(size=12)
        D = pairwise_distances(y, 4, 3)
        np.testing.assert_allclose(D, D.T)
        np.testing.assert_array_equal(np.diag(D), 0.0)
        Y = y.reshape(4, 3)
        assert D[1, 3] == pytest.approx(np.linalg.norm(Y[1] - Y[3]))

    def test_spread_zero_for_identical(self, cfg):
        y = np.tile([0.3, 0.9], cfg.N)
        assert preference_spread(y, cfg) == pytest.approx(0.0, abs=1e-15)

    def test_frequency_rows(self, fig3a, cfg):
        freq = preference_frequency(fig3a.trajectory, cfg)
        np.testing.assert_array_equal(freq.sum(axis=1), cfg.N)
        np.testing.assert_array_equal(freq, fig3a.metrics.frequency)

    def test_bundle_shapes(self, fig3a):
        m = fig3a.metrics
        n = len(m.taus)
        assert m.dominant.shape == (n, 3)
        assert m.simplex_points.shape == (n, 3, 2)
        assert m.product_points.shape == (3, 2)
        assert np.all(np.diff(m.taus) > 0)


class TestFigures:
    def test_fig3a(self, fig3a):
        s = fig3a.summary()
        assert all(s["dominant_constant"])
        assert s["final_dominant"] == [1, 3, 2]
        assert s["pref_spread_final"] < s["pref_spread_initial"]
        assert s["tau_final"] == pytest.approx(1000.0)
        assert not s["consensus"]

    def test_fig3b(self):
        s = run_experiment(fig3b_spec()).summary()
        assert s["consensus"]
        assert s["max_pairwise_final"] < 1e-3
        assert len(set(s["final_dominant"])) == 1
        assert s["overrides"] == {"a": 4.0}

    def test_fig3c(self):
        s = run_experiment(fig3c_spec()).summary()
        Y = np.array(s["final_y"])
        assert np.linalg.norm(Y[1] - Y[2]) < 1e-3
        assert s["final_dominant"][1] == s["final_dominant"][2]

    def test_fig3c_config(self):
        spec = fig3c_spec()
        np.testing.assert_array_equal(spec.cfg.V[:, 2], [2.0, 3.0, 1.1])
        np.testing.assert_array_equal(spec.cfg.V[:, :2], baseline_spec().cfg.V[:, :2])

    def test_fig2_instance(self):
        spec = fig2_spec()
        assert spec.cfg.N == spec.cfg.p == 2
        assert spec.T + 1 == 10**6
        assert spec.tau_max == pytest.approx(harmonic_time(10**6) - 1.0)

    def test_fig2_short_overlay(self):
        spec = fig2_spec()
        T = 2000
        tau = float(harmonic_time(T + 1) - harmonic_time(1))
        from dataclasses import replace
        res = run_experiment(replace(spec, T=T, tau_max=tau), seed=3)
        ov = res.summary()["overlay"]
        assert ov["initial"] == pytest.approx(0.0, abs=1e-12)
        assert "error_t1000" in ov and "error_t1000000" not in ov
        assert res.summary()["t_final"] == T + 1

    def test_large_n_configs(self):
        a, b = large_n_spec(False), large_n_spec(True)
        assert (a.cfg.N, a.cfg.K, a.cfg.p, a.cfg.q) == (100, 10, 5, 5)
        np.testing.assert_array_equal(b.cfg.V[-1], 1.0)
        np.testing.assert_allclose(np.linalg.norm(b.cfg.W, axis=0), 1.0)
        np.testing.assert_array_equal(a.y0(), b.y0())
        assert (a.name, b.name) == ("fig4a", "fig4b")

    def test_get_spec(self):
        for fid in FIGURES:
            assert get_spec(fid).name == fid
        with pytest.raises(ConfigError):
            get_spec("fig9")

    def test_bad_engine(self):
        with pytest.raises(InvalidArgumentError):
            run_experiment(baseline_spec(), engine="mcmc")


class TestOverrides:
    def test_nested(self, cfg):
        doc = apply_overrides(cfg.to_dict(), {"a": 4.0, "user_attrs.2.2": 1.1})
        assert doc["a"] == 4.0
        assert doc["user_attrs"][2][2] == 1.1
        assert cfg.a == 8.0
        ModelConfig.from_dict(doc)

    @pytest.mark.parametrize("key", ["alpha", "user_attrs.7", "user_attrs.x", "a.b"])
    def test_errors(self, cfg, key):
        with pytest.raises(ConfigError) as exc:
            apply_overrides(cfg.to_dict(), {key: 1.0})
        assert exc.value.key == key


class TestArtifacts:
    def test_write_and_refuse(self, fig3a, tmp_path):
        paths = write_artifacts(fig3a, tmp_path)
        names = sorted(p.name for p in paths)
        assert names == ["fig3a.svg", "metrics.csv", "summary.json", "trajectory.csv"]
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["final_dominant"] == [1, 3, 2]
        assert (tmp_path / "fig3a.svg").read_text().lstrip().startswith("<?xml")
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0].split(",")
        assert header[:4] == ["t", "tau", "max_pairwise", "pref_spread"]
        with pytest.raises(FileExistsError):
            write_artifacts(fig3a, tmp_path)
        write_artifacts(fig3a, tmp_path, force=True)

    def test_metrics_csv_rows(self, fig3a, tmp_path):
        path = tmp_path / "m.csv"
        fig3a.metrics.to_csv(path)
        assert len(path.read_text().splitlines()) == len(fig3a.metrics.taus) + 1

    def test_compute_metrics_stochastic(self, tmp_path):
        from dataclasses import replace
        res = run_experiment(replace(baseline_spec(), T=3000), engine="stochastic", seed=11)
        m = compute_metrics(res.trajectory, res.spec.cfg, res.trajectory.taus, res.trajectory.times)
        np.testing.assert_array_equal(m.frequency, res.metrics.frequency)
        assert res.summary()["seed"] == 11
        assert m.times[0] == 1
