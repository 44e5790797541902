"""Privacy accounting for voltage release with respect to the admittance matrix.

The guarantee is ``eps = B + psi_bar * tau(delta)`` where ``B`` collects the
Jacobian-ratio bound ``Lambda_II``, ``psi_bar**2 / 2`` and a mean-shift term.
This module computes every intermediate, bounds ``||M^{-1}||`` either in
closed form or by Monte Carlo with a Clopper-Pearson correction, and
provides an empirical log-likelihood-ratio oracle for validation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from dpphasor.errors import InadmissibleError, InputError, NumericalError
from dpphasor.grid import NetworkStats
from dpphasor.powerflow import (
    InjectionSpec,
    PowerFlowConfig,
    effective_real_jacobian,
    implied_active_load,
    load_direction,
    log_volume_factor,
    m_tilde_inv_norm,
    solve_powerflow_batch,
)

NULL_SPACE_RTOL = 1e-8
ADJACENT_SAMPLE_POINTS = 8
CP_TOL = 1e-12


# -- privacy-loss bound quantities -----------------------------------------------------

def sensitivity_d(v_max: float, d_max: int, p_min: float) -> float:
    """Entrywise log-load sensitivity ``V_max^2 sqrt(d_max) / p_min``."""
    if not p_min > 0:
        raise InputError("p_min must be positive; the log-load sensitivity is unbounded at 0")
    return v_max**2 * math.sqrt(d_max) / p_min


def precision_sum(sigma_t) -> float:
    """Sum of absolute entries of ``Sigma^{-1}``."""
    sig = np.atleast_2d(np.asarray(sigma_t, dtype=float))
    cond = np.linalg.cond(sig)
    if not np.isfinite(cond) or cond > 1e12:
        raise InputError(f"covariance is near singular (condition number {cond:.3g})")
    return float(np.abs(np.linalg.inv(sig)).sum())


def psi_bar(kappa: float, r: float, classes) -> float:
    """Uniform whitened-shift bound ``kappa r sqrt(sum d^2 gamma)``.

    ``classes`` is an iterable of ``(d_ell, gamma_ell)`` pairs.
    """
    return kappa * r * math.sqrt(sum(d * d * g for d, g in classes))


def chi2_tail_tau(n: int, T: int, delta: float) -> float:
    """Laurent-Massart radius: ``P(chi2_{nT} > tau^2) <= delta``."""
    if n < 1 or T < 1:
        raise InputError("n and T must be at least 1")
    if not 0 < delta < 1:
        raise InputError("delta must lie in (0, 1)")
    k = n * T
    lg = math.log(1.0 / delta)
    return math.sqrt(k + 2.0 * math.sqrt(k * lg) + 2.0 * lg)


def term1_bound(psi: float, tau: float, kappa: float, r: float, classes) -> float:
    """Injection-likelihood bound.

    ``classes`` holds ``(d_ell, gamma_ell, |C_ell|, 1^T Sigma 1)`` tuples.
    """
    shift = sum(d * math.sqrt(g * c) * math.sqrt(s1) for d, g, c, s1 in classes)
    return psi * tau + 0.5 * psi * psi + kappa * r * shift


def c_star(n: int, v_min: float, v_max: float) -> float:
    return math.sqrt(2.0) * (1.0 + math.sqrt(n) * v_max / v_min)


def alpha_param(m_tilde_star: float, n: int, v_min: float, v_max: float, kappa: float, r: float) -> float:
    """Admissibility parameter ``||M^{-1}||_* C_* kappa r``."""
    if r == 0:
        return 0.0
    return m_tilde_star * c_star(n, v_min, v_max) * kappa * r


def term2_bound(alpha: float, n: int, T: int) -> float:
    """Jacobian-ratio bound ``T sqrt(n) alpha (2+alpha) / (2 (1 - 4 alpha))``."""
    if not alpha < 0.25:
        raise InadmissibleError(f"admissibility condition alpha < 1/4 violated (alpha = {alpha:.6g})")
    return T * math.sqrt(n) * alpha * (2.0 + alpha) / (2.0 * (1.0 - 4.0 * alpha))


# -- report -----------------------------------------------------------------

@dataclass(frozen=True)
class ClassTerms:
    class_id: int
    p_min: float
    size: int
    d_ell: float
    gamma_ell: float
    ones_sigma_ones: float
    bias: float


@dataclass(frozen=True)
class PrivacyReport:
    epsilon: float
    delta: float
    delta_m: float
    delta_total: float
    alpha: float
    lambda_bar_ii: float
    psi_bar: float
    tau: float
    bias_b: float
    term1: float
    c_star: float
    m_tilde_star: float
    m_tilde_source: str
    admissible: bool
    r: float
    kappa: float
    n: int
    T: int
    v_min: float
    v_max: float
    d_max: int
    classes: tuple[ClassTerms, ...]
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        d["notes"] = list(self.notes)
        return d

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return _jsonable(x.item())
    return x


def class_terms(classes, v_max: float, d_max: int) -> list[ClassTerms]:
    """Per-class ``d_ell``, ``gamma_ell`` and ``1^T Sigma 1`` from fitted classes.

    Each class needs ``p_min``, ``sigma_t``, ``members`` and ``class_id``.
    """
    out = []
    for c in classes:
        d = sensitivity_d(v_max, d_max, c.p_min)
        g = precision_sum(c.sigma_t)
        s1 = float(np.asarray(c.sigma_t).sum())
        size = len(c.members)
        out.append(ClassTerms(c.class_id, c.p_min, size, d, g, s1, d * math.sqrt(g * size) * math.sqrt(s1)))
    return out


def epsilon_total(
    r: float,
    delta: float,
    kappa: float,
    classes,
    m_tilde_star: float,
    n: int,
    T: int,
    v_min: float,
    v_max: float,
    d_max: int,
    m_tilde_source: str = "closed-form",
    delta_m: float = 0.0,
    strict: bool = True,
    notes=(),
) -> PrivacyReport:
    """Compose the full guarantee and keep every intermediate.

    ``classes`` are fitted load classes (see :func:`class_terms`). With
    ``strict`` an inadmissible ``alpha`` raises; otherwise the report is
    returned with ``epsilon = inf`` and ``admissible = False``.
    """
    if r < 0:
        raise InputError("adjacency radius must be nonnegative")
    terms = class_terms(classes, v_max, d_max)
    tau = chi2_tail_tau(n, T, delta)
    psi = psi_bar(kappa, r, [(c.d_ell, c.gamma_ell) for c in terms])
    t1 = term1_bound(psi, tau, kappa, r, [(c.d_ell, c.gamma_ell, c.size, c.ones_sigma_ones) for c in terms])
    alpha = alpha_param(m_tilde_star, n, v_min, v_max, kappa, r)
    admissible = alpha < 0.25
    if admissible:
        lam = term2_bound(alpha, n, T)
        bias = lam + 0.5 * psi * psi + kappa * r * sum(c.bias for c in terms)
        eps = bias + psi * tau
    elif strict:
        term2_bound(alpha, n, T)  # raises with the admissibility message
    else:
        lam = bias = eps = math.inf
    return PrivacyReport(
        epsilon=eps,
        delta=delta,
        delta_m=delta_m,
        delta_total=delta + delta_m,
        alpha=alpha,
        lambda_bar_ii=lam,
        psi_bar=psi,
        tau=tau,
        bias_b=bias,
        term1=t1,
        c_star=c_star(n, v_min, v_max),
        m_tilde_star=m_tilde_star,
        m_tilde_source=m_tilde_source,
        admissible=bool(admissible),
        r=r,
        kappa=kappa,
        n=n,
        T=T,
        v_min=v_min,
        v_max=v_max,
        d_max=d_max,
        classes=tuple(terms),
        notes=tuple(notes),
    )


STANDARD_NOTES = (
    "class covariances are the fitted (noised) ones used for sampling",
    "voltage-manifold equality between Y and Y' is enforced to first order only",
)


# -- ||M^{-1}|| bounds --------------------------------------------------------

def voltvar_constant(spec: InjectionSpec, h_max: float, v_min: float, v_max: float) -> float:
    """``h_max / V_min * max_k gamma_k ||phi_k'||`` over the good-set band."""
    best = 0.0
    for g, c in zip(spec.gamma, spec.voltvar):
        if c is not None:
            best = max(best, g * c.max_abs_slope(v_min, v_max))
    return h_max / v_min * best


def m_tilde_closed_form(
    stats: NetworkStats, v_min: float, v_max: float, kappa: float, r: float, n: int, c_vv: float = 0.0
) -> float:
    """Network-data bound on the worst-case ``||M^{-1}||_op``.

    ``1 / (sigma_M - C3 Delta_inf - C_vv - C_* kappa r)`` with
    ``sigma_M = sigma_min(Y) - ||Y1+b||_inf`` and
    ``C3 = (||Y||_inf + ||Y1+b||_inf) / V_min``.
    """
    sigma_m = stats.sigma_min_y - stats.flat_mismatch
    c3 = (stats.row_sum_norm + stats.flat_mismatch) / v_min
    dev = max(v_max - 1.0, 1.0 - v_min)
    denom = sigma_m - c3 * dev - c_vv - c_star(n, v_min, v_max) * kappa * r
    if not denom > 0:
        raise NumericalError(
            f"closed-form bound denominator is nonpositive ({denom:.4g}); use Monte Carlo calibration"
        )
    return 1.0 / denom


def shifted_threshold(mu0: float, cstar: float, kappa: float, r: float) -> float:
    """``mu0' = mu0 / (1 + mu0 C_* kappa r)``; an infinite ``mu0`` stays infinite."""
    if math.isinf(mu0):
        return math.inf
    return mu0 / (1.0 + mu0 * cstar * kappa * r)


def clopper_pearson_upper(k: int, n: int, confidence: float) -> float:
    """One-sided exact upper bound on a binomial rate: the ``p`` with
    ``P(Bin(n, p) <= k) = 1 - confidence``, found by bisection."""
    if not 0 <= k <= n or n < 1:
        raise InputError("need 0 <= k <= n and n >= 1")
    if not 0 < confidence < 1:
        raise InputError("confidence must lie in (0, 1)")
    if k == n:
        return 1.0
    target = 1.0 - confidence
    lo, hi = k / n, 1.0
    while hi - lo > CP_TOL:
        mid = 0.5 * (lo + hi)
        if sps.binom.cdf(k, n, mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class CalibrationResult:
    mu0: float
    mu0_prime: float
    exceedances: int
    trials: int
    delta_m_upper: float
    confidence: float
    max_observed: float
    solver_failures: int = 0
    inputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def calibrate_from_norms(norms, failures, mu0: float, cstar: float, kappa: float, r: float,
                         confidence: float = 0.95, inputs: dict | None = None) -> CalibrationResult:
    """Count trajectories exceeding the shifted threshold.

    ``norms`` has shape ``(N, T)`` (``||M^{-1}||_op`` per step); ``failures``
    marks trajectories with any solver failure, which count as exceedances.
    """
    norms = np.atleast_2d(np.asarray(norms, dtype=float))
    failures = np.asarray(failures, dtype=bool)
    mu0p = shifted_threshold(mu0, cstar, kappa, r)
    exceed = np.any(norms > mu0p, axis=1) | failures
    k = int(exceed.sum())
    N = norms.shape[0]
    finite = norms[~failures]
    return CalibrationResult(
        mu0=mu0,
        mu0_prime=mu0p,
        exceedances=k,
        trials=N,
        delta_m_upper=clopper_pearson_upper(k, N, confidence),
        confidence=confidence,
        max_observed=float(finite.max()) if finite.size else math.nan,
        solver_failures=int(failures.sum()),
        inputs=dict(inputs or {}),
    )


def sample_m_tilde_norms(red, model, spec: InjectionSpec, bus_ids, h_series, n_traj: int,
                         rng: np.random.Generator, cfg: PowerFlowConfig | None = None):
    """Draw ``n_traj`` daily trajectories from ``model`` and return
    ``(norms (n_traj, T), failed (n_traj,))``."""
    from dpphasor.mechanisms import draw_daily_loads

    p = draw_daily_loads(model, bus_ids, n_traj, rng, spec.load_mask)  # (days, T, n)
    days, T, n = p.shape
    h = np.broadcast_to(np.asarray(h_series, float), (T,))
    flat = spec.replace(p=p.reshape(days * T, n), h=np.tile(h, days))
    traj = solve_powerflow_batch(red, flat, cfg)
    norms = np.full(days * T, np.inf)
    ok = traj.converged
    norms[ok] = m_tilde_inv_norm(red, traj.v[ok], flat.replace(p=flat.p[ok], h=flat.h[ok]))
    failed = ~ok.reshape(days, T).all(axis=1)
    return norms.reshape(days, T), failed


def mc_calibrate(red, model, spec: InjectionSpec, bus_ids, h_series, mu0: float, n_traj: int,
                 confidence: float, kappa: float, r: float, rng_seed: int = 0,
                 cfg: PowerFlowConfig | None = None) -> CalibrationResult:
    """Monte Carlo calibration of the ``||M^{-1}||`` threshold.

    A trajectory is an exceedance if any of its steps has
    ``||M^{-1}||_op > mu0'`` or the solver fails on it.
    """
    if not mu0 > 0:
        raise InputError("mu0 must be positive")
    rng = np.random.default_rng(rng_seed)
    norms, failed = sample_m_tilde_norms(red, model, spec, bus_ids, h_series, n_traj, rng, cfg)
    net = red.network
    cs = c_star(net.n, net.v_min, net.v_max)
    return calibrate_from_norms(
        norms, failed, mu0, cs, kappa, r, confidence,
        inputs={"n_traj": n_traj, "rng_seed": rng_seed, "r": r, "kappa": kappa},
    )


def suggest_mu0(observed_max: float, cstar: float, kappa: float, r: float, margin: float = 1.05) -> float:
    """Smallest threshold whose shifted value clears ``margin * observed_max``."""
    target = margin * observed_max
    denom = 1.0 - target * cstar * kappa * r
    if denom <= 0:
        raise InadmissibleError("no finite threshold clears the observed norms at this radius")
    return target / denom


# -- baseline sensitivities -------------------------------------------------

def sensitivity_voltage_y(v_min, v_max, n, kappa, r, m_tilde_star) -> float:
    """``Delta_2^(Y) = V_max^2 sqrt(n) kappa r ||M^{-1}|| / V_min``."""
    return v_max**2 * math.sqrt(n) * kappa * r * m_tilde_star / v_min


def sensitivity_voltage_load(v_min, delta_load, m_tilde_star) -> float:
    """``Delta_2^(load->v) = sqrt(2) Delta_load ||M^{-1}|| / V_min``."""
    return math.sqrt(2.0) * delta_load * m_tilde_star / v_min


def gaussian_voltage_sigma(delta2: float, eps: float, delta: float, T: int) -> float:
    """Per-coordinate voltage noise ``sqrt(T) Delta_2 sqrt(2 ln(1.25/delta)) / eps``."""
    if math.isinf(eps):
        return 0.0
    if not eps > 0 or not 0 < delta < 1:
        raise InputError("need eps > 0 and delta in (0, 1)")
    return math.sqrt(T) * delta2 * math.sqrt(2.0 * math.log(1.25 / delta)) / eps


def noisy_load_sigma(n_l: int, T: int, delta_load: float, eps_load: float, delta: float) -> float:
    """Per-entry load noise ``sqrt(n_L T) Delta_load sqrt(2 ln(1.25/delta)) / eps``."""
    if math.isinf(eps_load):
        return 0.0
    return math.sqrt(n_l * T) * delta_load * math.sqrt(2.0 * math.log(1.25 / delta)) / eps_load


@dataclass(frozen=True)
class SensitivityTable:
    delta2_y: float
    delta2_load: float
    delta2_joint: float
    delta_load: float
    n_l: int
    T: int

    def sigma_voltage(self, eps, delta) -> float:
        return gaussian_voltage_sigma(self.delta2_y, eps, delta, self.T)

    def sigma_joint(self, eps, delta) -> float:
        return gaussian_voltage_sigma(self.delta2_joint, eps, delta, self.T)

    def sigma_load(self, eps_load, delta_load) -> float:
        return noisy_load_sigma(self.n_l, self.T, self.delta_load, eps_load, delta_load)


def baseline_sensitivities(v_min, v_max, n, kappa, r, m_tilde_star, delta_load, n_l, T) -> SensitivityTable:
    dy = sensitivity_voltage_y(v_min, v_max, n, kappa, r, m_tilde_star)
    dl = sensitivity_voltage_load(v_min, delta_load, m_tilde_star)
    return SensitivityTable(dy, dl, max(dy, dl), delta_load, n_l, T)


# -- adjacent admittance ----------------------------------------------------

def _sym_from_params(theta: np.ndarray, n: int) -> np.ndarray:
    iu = np.triu_indices(n)
    k = iu[0].size
    z = np.zeros((n, n), dtype=complex)
    z[iu] = theta[:k] + 1j * theta[k:]
    return z + np.triu(z, 1).T


def _consistency_residual(dy: np.ndarray, v: np.ndarray, tan: np.ndarray, load_mask: np.ndarray):
    """Change of the implied load injection under ``Y - dY`` at voltages ``v``.

    Load buses must keep ``Im = tan * Re``; other buses must keep zero load.
    """
    ds = v * np.conj(v @ dy.T)
    rows = []
    for k in range(v.shape[-1]):
        if load_mask[k]:
            rows.append(ds[..., k].imag - tan[k] * ds[..., k].real)
        else:
            rows.append(ds[..., k].real)
            rows.append(ds[..., k].imag)
    return np.stack(rows, axis=-1).ravel()


def consistency_residual(dy, v, spec: InjectionSpec) -> np.ndarray:
    return _consistency_residual(np.asarray(dy, complex), np.atleast_2d(v), spec.tan_theta, spec.load_mask)


def construct_adjacent_y(red, v_samples, r: float, kappa: float, rng: np.random.Generator,
                         spec: InjectionSpec, n_points: int = ADJACENT_SAMPLE_POINTS,
                         fd_step: float = 1e-3) -> np.ndarray:
    """A symmetric perturbation ``dY`` with ``||dY||_F = kappa r`` that keeps the
    implied injections power-factor consistent to first order.

    The consistency constraints at ``n_points`` of the supplied voltages are
    differentiated by central finite differences over the ``n(n+1)`` real
    parameters of a complex symmetric matrix; a Gaussian direction is
    projected on the numerical null space (singular values below
    ``1e-8 sigma_max``). Use ``Y' = Y - dY``.
    """
    if not r > 0:
        raise InputError("adjacency radius must be positive")
    v = np.atleast_2d(np.asarray(v_samples, dtype=complex))
    n = v.shape[1]
    if v.shape[0] > n_points:
        v = v[rng.choice(v.shape[0], n_points, replace=False)]
    npar = n * (n + 1)
    tan = spec.tan_theta
    mask = spec.load_mask
    cols = []
    for i in range(npar):
        e = np.zeros(npar)
        e[i] = fd_step
        plus = _consistency_residual(_sym_from_params(e, n), v, tan, mask)
        minus = _consistency_residual(_sym_from_params(-e, n), v, tan, mask)
        cols.append((plus - minus) / (2 * fd_step))
    jac = np.stack(cols, axis=1)
    _, s, vt = np.linalg.svd(jac, full_matrices=True)
    s_full = np.zeros(npar)
    s_full[: s.size] = s
    null = vt[s_full < NULL_SPACE_RTOL * max(s_full.max(), 1e-300)]
    if null.shape[0] == 0:
        raise NumericalError("power-factor consistency constraints leave no admissible direction")
    coef = null.T @ (null @ rng.standard_normal(npar))
    dy = _sym_from_params(coef, n)
    return dy * (kappa * r / np.linalg.norm(dy))


# -- empirical LLR oracle ---------------------------------------------------

def _class_columns(model, bus_ids):
    index = {b: i for i, b in enumerate(bus_ids)}
    return [(c, np.array([index[m] for m in c.members])) for c in model.classes]


def injection_llr(xi, xi_prime, model, bus_ids) -> np.ndarray:
    """Midpoint-formula log density ratio of implied loads.

    ``xi``/``xi_prime`` have shape ``(..., T, n)``; returns shape ``(...)``.
    Per bus: ``Delta^T Sigma^{-1} (mu - Sigma 1 - xi_bar)``, i.e. the
    quadratic term of the log-normal density plus the ``-1^T xi`` change of
    variables from log-loads to loads.
    """
    total = 0.0
    for cls, cols in _class_columns(model, bus_ids):
        a = np.moveaxis(xi[..., cols], -1, -2)  # (..., |C|, T)
        b = np.moveaxis(xi_prime[..., cols], -1, -2)
        delta = a - b
        mid = 0.5 * (a + b)
        rhs = cls.mu - cls.sigma_t.sum(axis=1) - mid
        prec_rhs = np.linalg.solve(cls.sigma_t, np.moveaxis(rhs, -1, 0).reshape(cls.T, -1))
        prec_rhs = np.moveaxis(prec_rhs.reshape((cls.T,) + rhs.shape[:-1]), 0, -1)
        total = total + np.sum(delta * prec_rhs, axis=(-1, -2))
    return np.asarray(total)


def _implied_log_loads(red, v, spec, cols):
    p = implied_active_load(red, v, spec)
    sel = p[..., cols]
    if np.any(sel <= 0) or not np.all(np.isfinite(sel)):
        raise InputError("implied load nonpositive; the alternative admittance leaves the loading envelope")
    out = np.zeros_like(p)
    out[..., cols] = np.log(sel)
    return out


@dataclass(frozen=True)
class LlrResult:
    term1: np.ndarray
    term2: np.ndarray
    term2_steps: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.term1 + self.term2


def empirical_llr_batch(red, red_prime, v, model, bus_ids, spec: InjectionSpec, h_series=0.0) -> LlrResult:
    """LLR terms for a batch of released trajectories ``v`` of shape ``(m, T, n)``.

    ``term1`` is the injection-likelihood ratio under the (untruncated)
    class log-normal; ``term2_steps[t] = log |J_Y(v_t)| - log |J_Y'(v_t)|``.
    """
    v = np.asarray(v, dtype=complex)
    if v.ndim == 2:
        v = v[None]
    m, T, n = v.shape
    h = np.broadcast_to(np.asarray(h_series, float), (T,))
    flat_v = v.reshape(m * T, n)
    sp = spec.replace(p=np.zeros((m * T, n)), h=np.tile(h, m))
    cols = np.concatenate([c for _, c in _class_columns(model, bus_ids)])
    xi = _implied_log_loads(red, flat_v, sp, cols).reshape(m, T, n)
    xi_p = _implied_log_loads(red_prime, flat_v, sp, cols).reshape(m, T, n)
    t1 = injection_llr(xi, xi_p, model, bus_ids)
    lv = log_volume_factor(red, flat_v, sp) - log_volume_factor(red_prime, flat_v, sp)
    steps = lv.reshape(m, T)
    return LlrResult(np.asarray(t1, float), steps.sum(axis=1), steps)


def empirical_llr(red, red_prime, v, model, bus_ids, spec: InjectionSpec, h_series=0.0):
    """``(term1, term2)`` for one released trajectory ``v`` of shape ``(T, n)``."""
    res = empirical_llr_batch(red, red_prime, np.asarray(v)[None], model, bus_ids, spec, h_series)
    return float(res.term1[0]), float(res.term2[0])


def term2_diagnostics(red, red_prime, v, spec: InjectionSpec) -> dict:
    """Jacobian-ratio quantities at a single voltage ``v``.

    ``K = J^{-1} (J' - J)``, ``S = (I+K)(I+K)^T`` and ``W = U^T (I - S^{-1}) U``
    with ``U`` the left singular vectors of ``DG``; then
    ``log(|J_Y| / |J_Y'|) = -1/2 log det(I - W)``.
    """
    v = np.atleast_2d(np.asarray(v, dtype=complex))
    sp = spec.replace(p=np.zeros(v.shape), h=spec.h if np.ndim(spec.h) == 0 else spec.h[:1])
    j = effective_real_jacobian(red, v, sp)[0]
    jp = effective_real_jacobian(red_prime, v, sp)[0]
    k = np.linalg.solve(j, jp - j)
    eye = np.eye(k.shape[0])
    s = (eye + k) @ (eye + k).T
    dg = -np.linalg.solve(j, load_direction(sp))
    u, _, _ = np.linalg.svd(dg, full_matrices=False)
    w = u.T @ (eye - np.linalg.inv(s)) @ u
    sign, logdet = np.linalg.slogdet(np.eye(w.shape[0]) - w)
    if sign <= 0:
        raise NumericalError("I - W is not positive definite")
    return {
        "k_fro": float(np.linalg.norm(k)),
        "w_fro": float(np.linalg.norm(w)),
        "log_ratio": float(-0.5 * logdet),
        "K": k,
        "W": w,
    }
