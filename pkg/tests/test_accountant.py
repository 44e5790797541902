import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dpphasor.accountant import (
    alpha_param,
    baseline_sensitivities,
    c_star,
    calibrate_from_norms,
    chi2_tail_tau,
    clopper_pearson_upper,
    consistency_residual,
    construct_adjacent_y,
    empirical_llr,
    epsilon_total,
    gaussian_voltage_sigma,
    m_tilde_closed_form,
    mc_calibrate,
    noisy_load_sigma,
    precision_sum,
    psi_bar,
    sensitivity_d,
    sensitivity_voltage_load,
    sensitivity_voltage_y,
    shifted_threshold,
    suggest_mu0,
    term1_bound,
    term2_bound,
    term2_diagnostics,
    voltvar_constant,
)
from dpphasor.errors import InadmissibleError, InputError, NumericalError
from dpphasor.grid import Bus, Line, NetworkModel, NetworkStats, network_stats, reduce_network
from dpphasor.loads import LoadClass, LoadClassModel
from dpphasor.powerflow import InjectionSpec, implied_active_load, m_tilde_inv_norm, solve_powerflow_batch
from dpphasor.voltvar import VoltVarCurve

from conftest import one_bus


def hand_class(p_min=0.55125, T=3, members=("a",)):
    """d = 1.05^2 sqrt(1) / 0.55125 = 2, gamma = 3, 1^T Sigma 1 = 3."""
    return LoadClass(0, np.zeros(T), np.eye(T), 0.0, p_min, 10.0, members)


class TestSensitivityD:
    @pytest.mark.parametrize("v,d,p,out", [(1.0, 1, 1.0, 1.0), (1.05, 4, 0.1, 22.05)])
    def test_values(self, v, d, p, out):
        assert sensitivity_d(v, d, p) == pytest.approx(out, abs=1e-12)

    def test_scaling(self):
        assert sensitivity_d(1.05, 4, 0.2) == pytest.approx(sensitivity_d(1.05, 4, 0.1) / 2)

    def test_zero_p_min(self):
        with pytest.raises(InputError):
            sensitivity_d(1.0, 1, 0.0)


class TestPrecisionSum:
    def test_identity(self):
        assert precision_sum(np.eye(3)) == pytest.approx(3.0)

    def test_scaled(self):
        assert precision_sum(2 * np.eye(3)) == pytest.approx(1.5)

    def test_correlated(self):
        assert precision_sum([[1.0, 0.5], [0.5, 1.0]]) == pytest.approx(4.0)

    def test_near_singular(self):
        with pytest.raises(InputError):
            precision_sum([[1.0, 1.0], [1.0, 1.0 + 1e-14]])


class TestPsiBar:
    def test_zero_r(self):
        assert psi_bar(1.0, 0.0, [(2.0, 3.0)]) == 0.0

    def test_value(self):
        assert psi_bar(1.0, 0.1, [(2.0, 3.0)]) == pytest.approx(math.sqrt(0.12), abs=1e-12)

    def test_linear_in_kappa(self):
        assert psi_bar(2.0, 0.1, [(2.0, 3.0)]) == pytest.approx(2 * psi_bar(1.0, 0.1, [(2.0, 3.0)]))


class TestTau:
    def test_value(self):
        assert chi2_tail_tau(1, 4, math.exp(-1)) == pytest.approx(math.sqrt(10), abs=1e-12)

    def test_delta_to_one(self):
        assert chi2_tail_tau(3, 4, 1 - 1e-15) == pytest.approx(math.sqrt(12), rel=1e-6)

    @pytest.mark.parametrize("args", [(0, 4, 0.1), (1, 4, 0.0), (1, 4, 1.0)])
    def test_domain(self, args):
        with pytest.raises(InputError):
            chi2_tail_tau(*args)

    @pytest.mark.parametrize("k,delta", [(1, 0.05), (4, 0.05), (12, 0.01), (96, 0.1)])
    def test_tail_validity_exact(self, k, delta):
        # exact chi-square survival at tau^2 never exceeds delta
        assert stats.chi2.sf(chi2_tail_tau(1, k, delta) ** 2, k) <= delta


class TestTerm1Bound:
    def test_zero_r(self):
        assert term1_bound(0.0, 3.0, 1.0, 0.0, [(2.0, 3.0, 1, 3.0)]) == 0.0

    def test_hand_value(self):
        tau = chi2_tail_tau(1, 3, math.exp(-1))
        psi = psi_bar(1.0, 0.1, [(2.0, 3.0)])
        # psi*tau + psi^2/2 + kappa r d sqrt(gamma |C|) sqrt(1^T Sigma 1)
        expected = math.sqrt(0.12) * math.sqrt(5 + 2 * math.sqrt(3)) + 0.06 + 0.1 * 2 * math.sqrt(3) * math.sqrt(3)
        assert term1_bound(psi, tau, 1.0, 0.1, [(2.0, 3.0, 1, 3.0)]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(1.66782, abs=1e-5)

    def test_monotone_in_r(self):
        tau = chi2_tail_tau(1, 3, 0.05)
        vals = [term1_bound(psi_bar(1.0, r, [(2.0, 3.0)]), tau, 1.0, r, [(2.0, 3.0, 1, 3.0)])
                for r in np.linspace(0, 1, 30)]
        assert np.all(np.diff(vals) >= 0)


class TestAlphaAndTerm2:
    def test_alpha_zero(self):
        assert alpha_param(1.0, 1, 0.95, 1.05, 1.0, 0.0) == 0.0

    def test_alpha_value(self):
        assert c_star(1, 0.95, 1.05) == pytest.approx(math.sqrt(2) * (1 + 1.05 / 0.95), abs=1e-15)
        assert c_star(1, 0.95, 1.05) == pytest.approx(2.97729, abs=1e-5)
        assert alpha_param(1.0, 1, 0.95, 1.05, 1.0, 0.05) == pytest.approx(0.14886, abs=1e-5)

    def test_term2_zero(self):
        assert term2_bound(0.0, 3, 4) == 0.0

    def test_term2_value(self):
        assert term2_bound(0.1, 1, 1) == pytest.approx(0.175, abs=1e-12)

    def test_inadmissible(self):
        with pytest.raises(InadmissibleError, match="alpha < 1/4"):
            term2_bound(0.25, 1, 1)

    def test_small_alpha_asymptote(self):
        assert term2_bound(1e-9, 4, 96) / (96 * 2 * 1e-9) == pytest.approx(1.0, rel=1e-8)


class TestEpsilonTotal:
    def test_zero_r(self):
        rep = epsilon_total(0.0, 0.05, 1.0, [hand_class()], 1.0, 1, 3, 0.95, 1.05, 1)
        assert rep.epsilon == 0.0
        assert rep.delta == 0.05

    def test_hand_composition(self):
        rep = epsilon_total(0.05, math.exp(-1), 1.0, [hand_class()], 1.0, 1, 3, 0.95, 1.05, 1)
        c = rep.classes[0]
        assert (c.d_ell, c.gamma_ell, c.ones_sigma_ones) == pytest.approx((2.0, 3.0, 3.0))
        alpha = 1.0 * math.sqrt(2) * (1 + 1.05 / 0.95) * 0.05
        lam = 3 * alpha * (2 + alpha) / (2 * (1 - 4 * alpha))
        psi = 0.05 * math.sqrt(4 * 3)
        tau = math.sqrt(3 + 2 * math.sqrt(3) + 2)
        expected = lam + 0.5 * psi**2 + 0.05 * 2 * math.sqrt(3) * math.sqrt(3) + psi * tau
        assert rep.epsilon == pytest.approx(expected, abs=1e-9)
        assert rep.alpha == pytest.approx(alpha, abs=1e-12)

    def test_monotone_in_r(self):
        eps = [epsilon_total(r, 0.05, 1.0, [hand_class()], 1.0, 1, 3, 0.95, 1.05, 1).epsilon
               for r in np.linspace(0, 0.08, 20)]
        assert np.all(np.diff(eps) > 0)

    def test_inadmissible_raises(self):
        with pytest.raises(InadmissibleError):
            epsilon_total(0.2, 0.05, 1.0, [hand_class()], 1.0, 1, 3, 0.95, 1.05, 1)

    def test_inadmissible_lenient(self):
        rep = epsilon_total(0.2, 0.05, 1.0, [hand_class()], 1.0, 1, 3, 0.95, 1.05, 1, strict=False)
        assert not rep.admissible
        assert math.isinf(rep.epsilon)
        assert json.loads(rep.to_json())["epsilon"] == "inf"

    def test_delta_m_accounted(self):
        rep = epsilon_total(0.01, 0.05, 1.0, [hand_class()], 1.0, 1, 3, 0.95, 1.05, 1, delta_m=0.02)
        assert rep.delta_total == pytest.approx(0.07)

    def test_report_round_trip(self, tmp_path):
        rep = epsilon_total(0.01, 0.05, 1.0, [hand_class()], 1.0, 1, 3, 0.95, 1.05, 1)
        rep.save(tmp_path / "r.json")
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["r"] == 0.01 and doc["classes"][0]["d_ell"] == pytest.approx(2.0)


class TestClosedForm:
    def stats1(self):
        return network_stats(one_bus())

    def test_one_bus_hand_value(self):
        m = m_tilde_closed_form(self.stats1(), 0.95, 1.05, 1.0, 0.01, 1)
        denom = 10 - (10 / 0.95) * 0.05 - math.sqrt(2) * (1 + 1.05 / 0.95) * 0.01
        assert m == pytest.approx(1 / denom, abs=1e-12)
        assert m == pytest.approx(0.10589, abs=1e-5)

    def test_flat_point(self):
        s = NetworkStats(d_max=1, sigma_min_y=7.0, flat_mismatch=0.0, row_sum_norm=7.0)
        assert m_tilde_closed_form(s, 1.0, 1.0 + 1e-300, 1.0, 0.0, 1) == pytest.approx(1 / 7.0)

    def test_voltvar_shrinks_denominator(self):
        a = 1 / m_tilde_closed_form(self.stats1(), 0.95, 1.05, 1.0, 0.01, 1)
        b = 1 / m_tilde_closed_form(self.stats1(), 0.95, 1.05, 1.0, 0.01, 1, c_vv=1.0)
        assert a - b == pytest.approx(1.0, abs=1e-12)

    def test_voltvar_constant(self):
        curve = VoltVarCurve(((0.9, 0.1), (1.0, 0.0)))  # |slope| 1
        spec = InjectionSpec(p=np.zeros(2), tan_theta=0.0, gamma=np.array([0.0, 0.95]),
                             voltvar=(None, curve), load_mask=np.array([True, False]))
        assert voltvar_constant(spec, 1.0, 0.95, 1.05) == pytest.approx(1.0)

    def test_nonpositive_denominator(self):
        with pytest.raises(NumericalError, match="Monte Carlo"):
            m_tilde_closed_form(self.stats1(), 0.5, 1.5, 1.0, 0.01, 1)

    def test_dominates_samples_one_bus(self):
        red = one_bus()
        bound = m_tilde_closed_form(self.stats1(), 0.95, 1.05, 1.0, 0.0, 1)
        # points with |v - 1| <= max(V_max - 1, 1 - V_min), where the bound's premise holds
        rng = np.random.default_rng(0)
        v = 1 + 0.05 * np.sqrt(rng.uniform(0, 1, 500)) * np.exp(2j * np.pi * rng.uniform(0, 1, 500))
        assert np.all(m_tilde_inv_norm(red, v.reshape(-1, 1)) <= bound)


class TestCalibration:
    def test_shifted_threshold(self):
        assert shifted_threshold(2.0, 2.97727, 1.0, 0.01) == pytest.approx(1.88761, abs=1e-5)

    def test_infinite_threshold(self):
        assert math.isinf(shifted_threshold(math.inf, 3.0, 1.0, 0.01))

    def test_clopper_pearson_zero(self):
        assert clopper_pearson_upper(0, 59, 0.95) == pytest.approx(1 - 0.05 ** (1 / 59), abs=1e-10)

    @pytest.mark.parametrize("k,n", [(1, 20), (5, 100), (37, 50)])
    def test_clopper_pearson_beta_quantile(self, k, n):
        assert clopper_pearson_upper(k, n, 0.9) == pytest.approx(stats.beta.ppf(0.9, k + 1, n - k), abs=1e-9)

    def test_clopper_pearson_all(self):
        assert clopper_pearson_upper(5, 5, 0.95) == 1.0

    def test_infinite_mu0_still_positive(self):
        res = calibrate_from_norms(np.ones((59, 4)), np.zeros(59, bool), math.inf, 3.0, 1.0, 0.01)
        assert res.exceedances == 0
        assert res.delta_m_upper == pytest.approx(1 - 0.05 ** (1 / 59), abs=1e-10)

    def test_failures_count_as_exceedances(self):
        fails = np.zeros(10, bool)
        fails[:3] = True
        res = calibrate_from_norms(np.ones((10, 4)), fails, 5.0, 3.0, 1.0, 0.0)
        assert res.exceedances == 3 and res.solver_failures == 3

    def test_planted_rate(self):
        rng = np.random.default_rng(0)
        N = 4000
        norms = rng.uniform(0, 1, (N, 1))
        # per-trajectory exceedance probability 0.1 at the shifted threshold 0.9
        res = calibrate_from_norms(norms, np.zeros(N, bool), 0.9, 1.0, 1.0, 0.0, confidence=0.95)
        assert abs(res.exceedances / N - 0.1) < 4 * math.sqrt(0.09 / N)
        assert res.delta_m_upper >= res.exceedances / N

    def test_mc_calibrate_one_bus(self):
        red = one_bus()
        spec = InjectionSpec(p=np.zeros(1), tan_theta=0.0, gamma=0.0)
        cls = LoadClass(0, np.log(np.full(4, 0.2)), 0.01 * np.eye(4), 0.0, 0.05, 0.4, ("a",))
        model = LoadClassModel((cls,), 360)
        res = mc_calibrate(red, model, spec, ("a",), 0.0, mu0=1.0, n_traj=30, confidence=0.95,
                           kappa=1.0, r=0.001, rng_seed=3)
        assert res.trials == 30 and res.exceedances == 0
        assert 0 < res.max_observed < res.mu0_prime
        again = mc_calibrate(red, model, spec, ("a",), 0.0, 1.0, 30, 0.95, 1.0, 0.001, rng_seed=3)
        assert again.to_json() == res.to_json()

    def test_suggest_mu0(self):
        mu0 = suggest_mu0(0.2, 3.0, 1.0, 0.01)
        assert shifted_threshold(mu0, 3.0, 1.0, 0.01) == pytest.approx(0.21)

    def test_suggest_mu0_impossible(self):
        with pytest.raises(InadmissibleError):
            suggest_mu0(10.0, 3.0, 1.0, 1.0)


class TestSensitivities:
    def test_voltage_y(self):
        assert sensitivity_voltage_y(0.95, 1.05, 4, 1.0, 0.05, 0.2) == pytest.approx(0.02321, abs=1e-5)

    def test_voltage_load(self):
        assert sensitivity_voltage_load(0.95, 0.5, 0.2) == pytest.approx(0.14887, abs=1e-5)

    def test_gaussian_sigma(self):
        assert gaussian_voltage_sigma(1.0, 1.0, 0.05, 1) == pytest.approx(math.sqrt(2 * math.log(25)), abs=1e-12)

    def test_sigma_sqrt_t(self):
        assert gaussian_voltage_sigma(1.0, 1.0, 0.05, 8) == pytest.approx(
            math.sqrt(2) * gaussian_voltage_sigma(1.0, 1.0, 0.05, 4))

    def test_infinite_eps(self):
        assert gaussian_voltage_sigma(1.0, math.inf, 0.05, 4) == 0.0

    def test_noisy_load(self):
        assert noisy_load_sigma(4, 96, 0.5, 50.0, 1e-4) == pytest.approx(
            math.sqrt(384) * 0.5 * math.sqrt(2 * math.log(12500)) / 50, abs=1e-12)

    def test_table(self):
        t = baseline_sensitivities(0.95, 1.05, 4, 1.0, 0.05, 0.2, 0.5, 4, 96)
        assert t.delta2_joint == pytest.approx(0.14887, abs=1e-5)
        assert t.sigma_joint(1.0, 0.05) > t.sigma_voltage(1.0, 0.05)

    @given(st.floats(0.1, 100.0), st.floats(0.1, 100.0))
    @settings(max_examples=50, deadline=None)
    def test_sigma_monotone_in_eps(self, e1, e2):
        lo, hi = sorted((e1, e2))
        assert gaussian_voltage_sigma(1.0, lo, 0.01, 96) >= gaussian_voltage_sigma(1.0, hi, 0.01, 96)


def two_load_feeder(theta=15.0):
    y = 1 / (0.004 + 0.008j)
    return NetworkModel(
        (Bus("s", "slack"), Bus("z", "zero-injection"),
         Bus("a", "load", class_id=0, power_factor_deg=theta), Bus("b", "load", class_id=0, power_factor_deg=theta)),
        (Line("s", "z", y), Line("z", "a", y), Line("z", "b", y)),
    )


class TestAdjacentY:
    def test_scalar_real_case(self):
        red = one_bus()
        spec = InjectionSpec(p=np.zeros(1), tan_theta=0.0, gamma=0.0)
        v = np.array([[0.95 + 0j], [0.99 + 0j]])
        dy = construct_adjacent_y(red, v, 0.01, 1.0, np.random.default_rng(0), spec)
        assert np.linalg.norm(dy) == pytest.approx(0.01)

    @pytest.mark.parametrize("seed", range(3))
    def test_norm_and_consistency(self, seed):
        net = two_load_feeder()
        red = reduce_network(net)
        spec = InjectionSpec.for_network(net)
        rng = np.random.default_rng(seed)
        traj = solve_powerflow_batch(red, spec.replace(p=rng.uniform(0.5, 2.0, (8, 2))))
        dy = construct_adjacent_y(red, traj.v, 0.05, red.kappa_kron, rng, spec)
        assert np.linalg.norm(dy) <= 0.05 * red.kappa_kron * (1 + 1e-12)
        np.testing.assert_allclose(dy, dy.T, atol=1e-15)
        res = consistency_residual(dy, traj.v, spec)
        assert np.max(np.abs(res)) <= 1e-6 * np.linalg.norm(dy)

    def test_radius_positive(self):
        with pytest.raises(InputError):
            construct_adjacent_y(one_bus(), np.ones((1, 1)), 0.0, 1.0, np.random.default_rng(0),
                                 InjectionSpec(p=np.zeros(1), tan_theta=0.0, gamma=0.0))


class TestEmpiricalLlr:
    T = 2

    def setup(self):
        red = one_bus()
        spec = InjectionSpec(p=np.zeros(1), tan_theta=0.0, gamma=0.0)
        sig = np.array([[0.04, 0.01], [0.01, 0.05]])
        cls = LoadClass(0, np.log([0.8, 1.1]), sig, 0.0, 0.3, 2.0, ("a",))
        model = LoadClassModel((cls,), 720)
        traj = solve_powerflow_batch(red, spec.replace(p=np.array([[0.7], [1.2]])))
        return red, spec, model, traj.v

    def test_identical_y(self):
        red, spec, model, v = self.setup()
        assert empirical_llr(red, red, v, model, ("a",), spec) == (0.0, 0.0)

    def test_direct_density_ratio(self):
        red, spec, model, v = self.setup()
        red_p = red.with_y(red.y_reduced - 0.05)
        t1, _ = empirical_llr(red, red_p, v, model, ("a",), spec)
        cls = model.classes[0]

        def log_density(p):
            xi = np.log(p)
            return stats.multivariate_normal(cls.mu, cls.sigma_t).logpdf(xi) - xi.sum()

        p = implied_active_load(red, v)[:, 0]
        pp = implied_active_load(red_p, v)[:, 0]
        assert t1 == pytest.approx(log_density(p) - log_density(pp), abs=1e-8)

    def test_antisymmetric(self):
        red, spec, model, v = self.setup()
        red_p = red.with_y(red.y_reduced - 0.05 + 0.02j)
        a = empirical_llr(red, red_p, v, model, ("a",), spec)
        b = empirical_llr(red_p, red, v, model, ("a",), spec)
        assert a[0] == pytest.approx(-b[0], abs=1e-12)
        assert a[1] == pytest.approx(-b[1], abs=1e-12)

    def test_nonpositive_load_rejected(self):
        red, spec, model, v = self.setup()
        with pytest.raises(InputError, match="nonpositive"):
            empirical_llr(red, red.with_y(red.y_reduced + 30.0), v, model, ("a",), spec)

    def test_term2_diagnostic_matches_volume_ratio(self):
        net = two_load_feeder()
        red = reduce_network(net)
        spec = InjectionSpec.for_network(net)
        cls = LoadClass(0, np.zeros(1), 0.01 * np.eye(1), 15.0, 0.2, 5.0, ("a", "b"))
        model = LoadClassModel((cls,), 1440)
        v = solve_powerflow_batch(red, spec.replace(p=np.array([[1.0, 1.5]]))).v
        dy = construct_adjacent_y(red, v, 0.05, red.kappa_kron, np.random.default_rng(1), spec)
        red_p = red.with_y(red.y_reduced - dy)
        _, t2 = empirical_llr(red, red_p, v, model, ("a", "b"), spec)
        diag = term2_diagnostics(red, red_p, v[0], spec)
        assert diag["log_ratio"] == pytest.approx(t2, abs=1e-9)
