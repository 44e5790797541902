import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpphasor.errors import InputError, SamplingError
from dpphasor.loads import (
    DpFitConfig,
    LoadClass,
    LoadClassModel,
    LoadPanel,
    TruncationStats,
    default_margins,
    fit_dp_gaussian,
    fit_load_model,
    gaussian_sigma,
    load_panel_csv,
    partition_classes,
    project_psd,
    pv_injection,
    reactive_from_active,
    sample_truncated_loads,
    save_panel_csv,
)
from dpphasor.voltvar import VoltVarCurve, flat_curve


def make_class(T=4, mu=0.0, var=0.01, p_min=math.exp(-10), p_max=math.exp(10), members=("a",)):
    return LoadClass(0, np.full(T, mu), var * np.eye(T), 0.0, p_min, p_max, members)


def planted_panel(days=20, T=8, seed=0):
    rng = np.random.default_rng(seed)
    levels = [0.1, 0.1, 0.1, 2.0, 2.0, 2.0]
    vals = np.array([lvl * np.exp(0.05 * rng.standard_normal(days * T)) for lvl in levels])
    return LoadPanel(vals, tuple(f"b{i}" for i in range(6)), 1440 // T)


class TestPanel:
    def test_csv_round_trip(self, tmp_path):
        panel = planted_panel()
        save_panel_csv(panel, tmp_path / "p.csv")
        back = load_panel_csv(tmp_path / "p.csv")
        np.testing.assert_array_equal(back.values, panel.values)
        assert back.bus_ids == panel.bus_ids
        assert back.resolution_minutes == panel.resolution_minutes

    def test_daily_layout(self):
        panel = planted_panel(days=3, T=8)
        assert panel.daily().shape == (6, 3, 8)
        np.testing.assert_array_equal(panel.day(1)[:, 0], panel.values[0, 8:16])

    def test_rejects_nonpositive(self):
        with pytest.raises(InputError):
            LoadPanel(np.array([[1.0, 0.0]]), ("a",), 720)

    def test_rejects_partial_day(self):
        with pytest.raises(InputError):
            LoadPanel(np.ones((1, 5)), ("a",), 720)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_panel_csv(tmp_path / "nope.csv")


class TestPartition:
    def test_single_class(self):
        assert partition_classes(planted_panel(), 1).tolist() == [0] * 6

    def test_singletons(self):
        assert partition_classes(planted_panel(), 6).tolist() == list(range(6))

    def test_planted_clusters(self):
        assert partition_classes(planted_panel(), 2).tolist() == [0, 0, 0, 1, 1, 1]

    def test_range_checked(self):
        with pytest.raises(InputError):
            partition_classes(planted_panel(), 7)


class TestFitDpGaussian:
    def test_infinite_budget_is_empirical(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0.0, 0.3, (50, 4)) + np.array([0.1, 0.2, -0.1, 0.0])
        mu, sig = fit_dp_gaussian(x, DpFitConfig(), np.random.default_rng(1), clip=(-5.0, 5.0))
        np.testing.assert_allclose(mu, x.mean(axis=0), atol=1e-14)
        np.testing.assert_allclose(sig, np.cov(x.T, bias=True), atol=1e-14)

    def test_identical_profiles_hit_floor(self):
        x = np.tile([0.1, 0.3, 0.2], (10, 1))
        _, sig = fit_dp_gaussian(x, DpFitConfig(eigen_floor=1e-4), np.random.default_rng(0), clip=(-1.0, 1.0))
        np.testing.assert_allclose(sig, 1e-4 * np.eye(3), atol=1e-15)

    def test_seeded_replay(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0.0, 0.2, (40, 3))
        a, b = -1.0, 1.0
        cfg = DpFitConfig(eps_load=1.0, delta_load=1e-3)
        mu, _ = fit_dp_gaussian(x, cfg, np.random.default_rng(7), clip=(a, b))
        # independent replay: mean noise is the first draw, scale from the clip-box diameter
        s_mean = (b - a) * math.sqrt(3) / 40 * math.sqrt(2 * math.log(1.25 / 5e-4)) / 0.5
        expected = x.mean(axis=0) + np.random.default_rng(7).normal(0.0, s_mean, 3)
        np.testing.assert_allclose(mu, expected, atol=1e-14)

    def test_needs_two_profiles(self):
        with pytest.raises(InputError):
            fit_dp_gaussian(np.zeros((1, 3)), DpFitConfig(), np.random.default_rng(0), clip=(-1, 1))

    def test_needs_clip(self):
        with pytest.raises(InputError):
            fit_dp_gaussian(np.zeros((3, 3)), DpFitConfig(), np.random.default_rng(0))

    def test_output_always_valid_class(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0.0, 0.2, (5, 6))
        for eps in (0.01, 1.0, 100.0):
            mu, sig = fit_dp_gaussian(x, DpFitConfig(eps_load=eps, delta_load=1e-3), rng, clip=(-1, 1))
            LoadClass(0, mu, sig, 0.0, 0.1, 10.0, ("a",))

    def test_noise_floor_scales_with_noise(self):
        x = np.random.default_rng(0).normal(0.0, 0.2, (30, 4))
        cfg = DpFitConfig(eps_load=1.0, delta_load=1e-3, noise_floor=True)
        _, sig = fit_dp_gaussian(x, cfg, np.random.default_rng(1), clip=(-1, 1))
        s_sec = gaussian_sigma(4 * 4 / 60, 0.5, 5e-4)
        assert np.linalg.eigvalsh(sig).min() >= 2 * s_sec * 2 * (1 - 1e-12)

    def test_idempotent_at_infinite_budget(self):
        T = 4
        cls = make_class(T=T, mu=0.5, var=0.04)
        x = np.log(sample_truncated_loads(cls, 1, np.random.default_rng(3), n_days=4000)[:, 0, :])
        mu, _ = fit_dp_gaussian(x, DpFitConfig(), np.random.default_rng(0), clip=(-10, 10))
        se = 0.2 / math.sqrt(4000)
        assert np.all(np.abs(mu - 0.5) <= 3 * se)

    def test_config_validation(self):
        with pytest.raises(InputError):
            DpFitConfig(eps_load=0)
        with pytest.raises(InputError):
            DpFitConfig(mean_fraction=1.0)


class TestProjectPsd:
    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_floor_respected(self, seed):
        a = np.random.default_rng(seed).standard_normal((5, 5))
        out = project_psd(a + a.T, 1e-3)
        assert np.linalg.eigvalsh(out).min() >= 1e-3 * (1 - 1e-9)
        np.testing.assert_array_equal(out, out.T)


class TestFitLoadModel:
    def test_assignment_and_theta(self):
        panel = planted_panel()
        assign = {f"b{i}": (0 if i < 3 else 1) for i in range(6)}
        theta = {f"b{i}": float(10 * i) for i in range(6)}
        model = fit_load_model(panel, 2, DpFitConfig(), 0, theta, assign)
        assert [c.members for c in model.classes] == [("b0", "b1", "b2"), ("b3", "b4", "b5")]
        assert model.classes[0].theta_deg == pytest.approx(10.0)
        assert model.classes[1].theta_deg == pytest.approx(40.0)
        assert model.classes[0].margins_source == "observed+10%"

    def test_user_margins(self):
        model = fit_load_model(planted_panel(), 2, DpFitConfig(), margins={0: (0.01, 1.0), 1: (0.5, 5.0)})
        assert (model.classes[0].p_min, model.classes[0].p_max) == (0.01, 1.0)
        assert model.classes[1].margins_source == "user"

    def test_default_margins(self):
        assert default_margins(np.array([1.0, 2.0])) == pytest.approx((0.9, 2.2))

    def test_json_round_trip(self, tmp_path):
        model = fit_load_model(planted_panel(), 2, DpFitConfig(eps_load=5.0, delta_load=1e-3))
        model.save(tmp_path / "m.json")
        back = LoadClassModel.load(tmp_path / "m.json")
        assert back.members == model.members
        for a, b in zip(back.classes, model.classes):
            np.testing.assert_array_equal(a.mu, b.mu)
            np.testing.assert_array_equal(a.sigma_t, b.sigma_t)
        assert back.eps_load == 5.0

    def test_reproducible(self):
        cfg = DpFitConfig(eps_load=5.0, delta_load=1e-3)
        a = fit_load_model(planted_panel(), 2, cfg, rng_seed=4)
        b = fit_load_model(planted_panel(), 2, cfg, rng_seed=4)
        np.testing.assert_array_equal(a.classes[1].sigma_t, b.classes[1].sigma_t)


class TestLoadClass:
    def test_rejects_indefinite(self):
        with pytest.raises(InputError):
            LoadClass(0, np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), 0.0, 0.1, 1.0, ("a",))

    def test_rejects_bad_margins(self):
        with pytest.raises(InputError):
            make_class(p_min=1.0, p_max=1.0)

    def test_bus_in_two_classes(self):
        with pytest.raises(InputError):
            LoadClassModel((make_class(members=("a",)), make_class(members=("a",))))


class TestTruncatedSampling:
    def test_inactive_truncation_mean(self):
        cls = make_class(T=3)
        x = np.log(sample_truncated_loads(cls, 1, np.random.default_rng(0), n_days=10_000))
        assert np.all(np.abs(x.mean(axis=(0, 1))) <= 3 * 0.1 / math.sqrt(10_000))

    def test_vanishing_box_fails(self):
        with pytest.raises(SamplingError, match="widen"):
            sample_truncated_loads(make_class(p_min=1.0, p_max=1.0 + 1e-9), 1, np.random.default_rng(0))

    @given(st.integers(0, 2**32 - 1), st.floats(0.3, 0.9), st.floats(1.1, 3.0))
    @settings(max_examples=40, deadline=None)
    def test_within_margins(self, seed, lo, hi):
        cls = make_class(T=5, var=0.0025, p_min=lo, p_max=hi)
        x = sample_truncated_loads(cls, 3, np.random.default_rng(seed), n_days=4)
        assert x.shape == (4, 3, 5)
        assert np.all((x >= lo) & (x <= hi))

    def test_stats_recorded(self):
        stats = TruncationStats()
        sample_truncated_loads(make_class(var=0.04, p_min=0.8, p_max=1.25), 2, np.random.default_rng(0), 5, stats)
        assert 0 < stats.acceptance <= 1
        assert 0 in stats.pilot_acceptance

    def test_bus_streams_independent_of_count(self):
        cls = make_class(var=0.04, p_min=0.8, p_max=1.25)
        # spawning is order-stable: the first bus sees the same stream regardless of n_buses
        a = sample_truncated_loads(cls, 1, np.random.default_rng(5), 3)
        b = sample_truncated_loads(cls, 1, np.random.default_rng(5), 3)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.slow
    def test_covariance_consistency(self):
        T = 4
        sig = 0.01 * (0.6 ** np.abs(np.subtract.outer(range(T), range(T))))
        cls = LoadClass(0, np.zeros(T), sig, 0.0, math.exp(-10), math.exp(10), ("a",))
        x = np.log(sample_truncated_loads(cls, 1, np.random.default_rng(0), n_days=100_000))[:, 0, :]
        emp = np.cov(x.T)
        assert np.linalg.norm(emp - sig) <= 0.1 * np.linalg.norm(sig)


class TestLogLipschitz:
    @given(st.floats(1e-3, 10.0), st.floats(1.0, 100.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=300, deadline=None)
    def test_property(self, p_min, ratio, u, w):
        p_max = p_min * ratio
        x = p_min + u * (p_max - p_min)
        xp = p_min + w * (p_max - p_min)
        # allowance for rounding in the two logarithms (the bound is tight at x = p_min)
        ulp = 4 * np.finfo(float).eps * max(abs(math.log(x)), abs(math.log(xp)), 1.0)
        assert abs(math.log(x) - math.log(xp)) <= abs(x - xp) / p_min + ulp


class TestInjections:
    @pytest.mark.parametrize(
        "p,theta,q", [(1.0, 0.0, 0.0), (1.0, 45.0, 1.0), (2.0, -30.0, -1.1547005383792515)]
    )
    def test_reactive(self, p, theta, q):
        assert reactive_from_active(p, theta) == pytest.approx(q, abs=1e-12)

    def test_reactive_range(self):
        with pytest.raises(InputError):
            reactive_from_active(1.0, 90.0)

    @pytest.mark.parametrize(
        "gamma,h,phi,s",
        [(1.0, 0.0, 0.3, 0j), (2.0, 0.5, 0.0, 1 + 0j), (1.0, 1.0, math.pi / 6, 0.8660254037844387 + 0.5j)],
    )
    def test_pv(self, gamma, h, phi, s):
        assert complex(pv_injection(gamma, h, phi)) == pytest.approx(s, abs=1e-12)

    def test_pv_negative(self):
        with pytest.raises(InputError):
            pv_injection(-1.0, 1.0, 0.0)


class TestVoltVar:
    def test_interpolation_and_hold(self):
        c = VoltVarCurve(((0.9, 0.4), (1.1, -0.4)))
        assert c.angle(1.0) == pytest.approx(0.0)
        assert c.angle(0.5) == pytest.approx(0.4)
        assert c.slope(1.0) == pytest.approx(-4.0)
        assert c.slope(1.2) == 0.0

    def test_max_slope_window(self):
        c = VoltVarCurve(((0.9, 0.3), (0.95, 0.0), (1.05, 0.0), (1.1, -0.5)))
        assert c.max_abs_slope(0.96, 1.04) == 0.0
        assert c.max_abs_slope() == pytest.approx(10.0)

    def test_flat(self):
        assert flat_curve().max_abs_slope() == 0.0

    def test_rejects_nonincreasing(self):
        with pytest.raises(InputError):
            VoltVarCurve(((1.0, 0.0), (1.0, 0.1)))
