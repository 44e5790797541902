"""AC power flow on a Kron-reduced feeder.

The retained-bus voltages ``v`` solve

    v * conj(Y v + b) = s_g(v) - s_p,      s_p = p (1 + j tan(theta)),

where ``s_g`` is the inverter injection ``gamma * h * exp(j phi(|v|))``.
Besides the Newton solver this module exposes the Wirtinger factorisation
``J = D(v) M`` of the power-flow Jacobian, the closed-form inverse load map,
the surface volume factor of the load-to-voltage map, and a sampled audit of
the operating assumptions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dpphasor import kernels
from dpphasor._newton_py import _jacobian, _mismatch
from dpphasor.errors import InputError, NumericalError, PowerFlowError, VoltageStabilityError
from dpphasor.voltvar import VoltVarCurve

__all__ = [
    "PowerFlowConfig",
    "InjectionSpec",
    "VoltageSolution",
    "VoltageTrajectory",
    "WirtingerJacobian",
    "FeasibilityReport",
    "VoltVarCurve",
    "evaluate_injection",
    "generation_injection",
    "implied_active_load",
    "no_load_voltage",
    "in_good_set",
    "solve_powerflow",
    "solve_powerflow_batch",
    "wirtinger_jacobian",
    "real_representation",
    "effective_real_jacobian",
    "load_direction",
    "volume_factor",
    "log_volume_factor",
    "m_tilde_inv_norm",
    "feasibility_audit",
]


@dataclass(frozen=True)
class PowerFlowConfig:
    tol: float = 1e-10
    max_iter: int = 50
    init: str = "no-load"
    damping: float = 1.0

    def __post_init__(self):
        if not self.tol > 0:
            raise InputError("tol must be positive")
        if self.max_iter < 1:
            raise InputError("max_iter must be at least 1")
        if self.init not in ("no-load", "flat"):
            raise InputError("init must be 'no-load' or 'flat'")
        if not 0 < self.damping <= 1:
            raise InputError("damping must lie in (0, 1]")


def _pack_voltvar(curves):
    xs, ys, ptr = [], [], [0]
    for c in curves:
        if c is not None:
            xs.extend(c.magnitudes.tolist())
            ys.extend(c.angles.tolist())
        ptr.append(len(xs))
    return np.array(xs, dtype=float), np.array(ys, dtype=float), np.array(ptr, dtype=np.int64)


@dataclass(frozen=True)
class InjectionSpec:
    """Injections at the retained buses.

    ``p`` is either one load vector ``(n,)`` or a batch ``(m, n)``; ``h`` is
    the irradiance, a scalar or one value per batch row. ``load_mask`` marks
    the buses whose active load is a free coordinate of the load-to-voltage
    map (the load buses).
    """

    p: np.ndarray
    tan_theta: np.ndarray
    gamma: np.ndarray
    h: float | np.ndarray = 0.0
    voltvar: tuple = ()
    load_mask: np.ndarray | None = None
    _packed: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        n = p.shape[-1]
        tan = np.broadcast_to(np.asarray(self.tan_theta, dtype=float), (n,)).copy()
        gamma = np.broadcast_to(np.asarray(self.gamma, dtype=float), (n,)).copy()
        vv = tuple(self.voltvar) if len(self.voltvar) else (None,) * n
        if len(vv) != n:
            raise InputError(f"need {n} volt-var entries, got {len(vv)}")
        mask = np.ones(n, bool) if self.load_mask is None else np.asarray(self.load_mask, bool)
        if mask.shape != (n,):
            raise InputError("load_mask has the wrong length")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise InputError("active loads must be finite and nonnegative")
        if np.any(p[..., ~mask] != 0):
            raise InputError("active load must be zero off load buses")
        if np.any(gamma < 0):
            raise InputError("pv capacity must be nonnegative")
        h = np.asarray(self.h, dtype=float)
        if np.any(h < 0):
            raise InputError("irradiance must be nonnegative")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "tan_theta", tan)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "h", h if h.ndim else float(h))
        object.__setattr__(self, "voltvar", vv)
        object.__setattr__(self, "load_mask", mask)
        object.__setattr__(self, "_packed", _pack_voltvar(vv))

    @property
    def n(self) -> int:
        return self.p.shape[-1]

    @property
    def s_p(self) -> np.ndarray:
        return self.p * (1.0 + 1j * self.tan_theta)

    @property
    def pv_magnitude(self) -> np.ndarray:
        """``gamma * h`` broadcast to the shape of ``p``."""
        h = np.asarray(self.h, dtype=float)
        if h.ndim:
            return h[:, None] * self.gamma
        return np.broadcast_to(self.gamma * h, self.p.shape).copy()

    def replace(self, **changes) -> "InjectionSpec":
        fields = dict(
            p=self.p, tan_theta=self.tan_theta, gamma=self.gamma, h=self.h,
            voltvar=self.voltvar, load_mask=self.load_mask,
        )
        fields.update(changes)
        return InjectionSpec(**fields)

    @classmethod
    def for_network(cls, network, p=None, h=0.0) -> "InjectionSpec":
        """Build the injection template from bus kinds in ``network``.

        Retained buses follow ``network.retained_ids``; ``p`` defaults to zero.
        """
        buses = [network.bus(b) for b in network.retained_ids]
        n = len(buses)
        tan = np.array([np.tan(np.deg2rad(b.power_factor_deg)) if b.kind == "load" else 0.0 for b in buses])
        gamma = np.array([b.gamma if b.kind == "pv" else 0.0 for b in buses])
        vv = tuple(b.voltvar if b.kind == "pv" else None for b in buses)
        mask = np.array([b.kind == "load" for b in buses])
        if p is None:
            p = np.zeros(n)
        return cls(p=p, tan_theta=tan, gamma=gamma, h=h, voltvar=vv, load_mask=mask)


@dataclass(frozen=True)
class VoltageSolution:
    v: np.ndarray
    residual: float
    iterations: int
    in_good_set: bool


@dataclass(frozen=True)
class VoltageTrajectory:
    """Batch of solves (one row per time step). ``status``: 0 ok, 1 no
    convergence, 2 singular Jacobian."""

    v: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    status: np.ndarray
    in_good_set: np.ndarray

    @property
    def converged(self) -> np.ndarray:
        return self.status == kernels.STATUS_CONVERGED

    @property
    def n_failed(self) -> int:
        return int(np.sum(~self.converged))


# -- maps -------------------------------------------------------------------

def _yb(red):
    net = red.network
    return net.y, net.b


def evaluate_injection(red, v) -> np.ndarray:
    """``F(v) = v * conj(Y v + b)``; leading batch axes allowed."""
    y, b = _yb(red)
    v = np.asarray(v, dtype=complex)
    return v * np.conj(v @ y.T + b)


def _pv_gain(spec: InjectionSpec, m: int) -> np.ndarray:
    """``gamma * h`` as an ``(m, n)`` array (``h`` scalar or one per row)."""
    h = np.asarray(spec.h, dtype=float)
    if h.ndim:
        return np.broadcast_to(h.reshape(-1, 1) * spec.gamma, (m, spec.n))
    return np.broadcast_to(spec.gamma * h, (m, spec.n))


def _angles_and_slopes(spec: InjectionSpec, absv):
    absv = np.atleast_2d(absv)
    ang = np.zeros_like(absv)
    slope = np.zeros_like(absv)
    for k, c in enumerate(spec.voltvar):
        if c is not None:
            ang[:, k] = c.angle(absv[:, k])
            slope[:, k] = c.slope(absv[:, k])
    return ang, slope


def generation_injection(spec: InjectionSpec, v) -> np.ndarray:
    """Inverter injection ``gamma h exp(j phi(|v|))`` at voltage ``v``."""
    v = np.asarray(v, dtype=complex)
    ang, _ = _angles_and_slopes(spec, np.abs(v))
    return (_pv_gain(spec, ang.shape[0]) * np.exp(1j * ang)).reshape(v.shape)


def implied_active_load(red, v, spec: InjectionSpec | None = None) -> np.ndarray:
    """Active load that makes ``v`` a power-flow solution (closed-form inverse)."""
    f = evaluate_injection(red, v)
    p = -f.real
    if spec is not None:
        p = p + generation_injection(spec, v).real
    return p


def no_load_voltage(red) -> np.ndarray:
    y, b = _yb(red)
    return -np.linalg.solve(y, b)


def in_good_set(v, v_min: float, v_max: float) -> np.ndarray:
    a = np.abs(np.asarray(v))
    return np.all((a >= v_min) & (a <= v_max), axis=-1)


# -- solver -----------------------------------------------------------------

def _initial_guess(red, cfg: PowerFlowConfig, m: int, n: int):
    if cfg.init == "flat":
        v0 = np.ones(n, dtype=complex)
    else:
        v0 = no_load_voltage(red)
    return np.tile(v0, (m, 1))


def solve_powerflow_batch(
    red, spec: InjectionSpec, cfg: PowerFlowConfig | None = None, v0=None, backend=None
) -> VoltageTrajectory:
    """Solve every row of ``spec.p``; failures are reported, not raised."""
    cfg = cfg or PowerFlowConfig()
    y, b = _yb(red)
    p = np.atleast_2d(spec.p)
    m, n = p.shape
    if n != y.shape[0]:
        raise InputError(f"load vector length {n} does not match network size {y.shape[0]}")
    if v0 is None:
        v0 = _initial_guess(red, cfg, m, n)
    else:
        v0 = np.broadcast_to(np.asarray(v0, dtype=complex), (m, n)).copy()
    gmag = _pv_gain(spec, m)
    vx, vy, vp = spec._packed
    v, res, its, st = kernels.newton_batch(
        y, b, p, spec.tan_theta, gmag, vx, vy, vp, v0, cfg.tol, cfg.max_iter, cfg.damping,
        backend=backend,
    )
    net = red.network
    return VoltageTrajectory(
        v=v,
        residual=np.asarray(res, float),
        iterations=np.asarray(its, np.int64),
        status=np.asarray(st, np.int64),
        in_good_set=in_good_set(v, net.v_min, net.v_max),
    )


def solve_powerflow(
    red, spec: InjectionSpec, cfg: PowerFlowConfig | None = None, v0=None, backend=None
) -> VoltageSolution:
    """Solve for one load vector; raises on failure.

    The default start is the no-load point ``-Y^{-1} b`` so Newton stays on the
    high-voltage branch.
    """
    if spec.p.ndim != 1:
        raise InputError("solve_powerflow takes a single load vector; use solve_powerflow_batch")
    traj = solve_powerflow_batch(red, spec, cfg, v0=v0, backend=backend)
    st = int(traj.status[0])
    res = float(traj.residual[0])
    its = int(traj.iterations[0])
    if st == kernels.STATUS_SINGULAR:
        raise VoltageStabilityError(
            f"power-flow Jacobian singular at iteration {its} (residual {res:.3e}); "
            "operating point at or beyond the voltage stability limit",
            residual=res,
            iterations=its,
        )
    if st != kernels.STATUS_CONVERGED:
        raise PowerFlowError(
            f"power flow did not converge in {its} iterations; last residual {res:.3e}",
            residual=res,
            iterations=its,
        )
    return VoltageSolution(traj.v[0], res, its, bool(traj.in_good_set[0]))


# -- Jacobians --------------------------------------------------------------

@dataclass(frozen=True)
class WirtingerJacobian:
    """``J = D(v) M`` with ``D(v) = diag(v, conj v)`` and

        M = [[diag(s / v^2), conj(Y)], [Y, diag(conj(s) / conj(v)^2)]]

    ``effective`` marks that the volt-var term ``D(v)^{-1} J_gen`` has been
    subtracted from ``M``.
    """

    m_tilde: np.ndarray
    d_diag: np.ndarray
    effective: bool

    @property
    def full(self) -> np.ndarray:
        return self.d_diag[:, None] * self.m_tilde

    @property
    def real(self) -> np.ndarray:
        return real_representation(self.full)

    def m_tilde_inv_norm(self) -> float:
        s = np.linalg.svd(self.m_tilde, compute_uv=False)
        return float(np.inf) if s[-1] == 0 else float(1.0 / s[-1])


def real_representation(j_w: np.ndarray) -> np.ndarray:
    """Map a Wirtinger Jacobian w.r.t. ``(v, conj v)`` to the real Jacobian
    w.r.t. ``(Re v, Im v)``: ``T^{-1} J T`` with ``T = [[I, jI], [I, -jI]]``."""
    n = j_w.shape[-1] // 2
    eye = np.eye(n)
    t = np.block([[eye, 1j * eye], [eye, -1j * eye]])
    t_inv = 0.5 * np.block([[eye, eye], [-1j * eye, 1j * eye]])
    out = t_inv @ j_w @ t
    return out.real


def wirtinger_jacobian(red, v, spec: InjectionSpec | None = None, effective: bool | None = None) -> WirtingerJacobian:
    """Factorised Wirtinger Jacobian of the residual at a single ``v``.

    With ``effective`` (default: whenever ``spec`` carries a volt-var curve
    with nonzero injection) the generation derivative is folded into ``M``.
    ``spec.h`` must be a scalar here.
    """
    y, b = _yb(red)
    v = np.asarray(v, dtype=complex)
    s = evaluate_injection(red, v)
    m = np.block([[np.diag(s / v**2), np.conj(y)], [y, np.diag(np.conj(s) / np.conj(v) ** 2)]])
    d = np.concatenate([v, np.conj(v)])
    has_vv = spec is not None and any(c is not None for c in spec.voltvar)
    if effective is None:
        effective = bool(has_vv and np.any(spec.pv_magnitude != 0))
    if effective and spec is not None:
        n = v.size
        absv = np.abs(v)
        _, slope = _angles_and_slopes(spec, absv)
        sg = generation_injection(spec, v)
        c = 1j * sg * slope[0] / (2 * absv)
        # Wirtinger derivatives of s_g and conj(s_g), each diagonal
        j_gen = np.zeros((2 * n, 2 * n), dtype=complex)
        idx = np.arange(n)
        j_gen[idx, idx] = c * np.conj(v)
        j_gen[idx, n + idx] = c * v
        j_gen[n + idx, idx] = np.conj(c) * np.conj(v)
        j_gen[n + idx, n + idx] = np.conj(c) * v
        m = m - j_gen / d[:, None]
    return WirtingerJacobian(m_tilde=m, d_diag=d, effective=bool(effective))


def m_tilde_inv_norm(red, v, spec: InjectionSpec | None = None) -> np.ndarray:
    """``||M^{-1}||_op`` (effective when volt-var is active) for a batch of ``v``.

    ``spec.h`` may carry one irradiance per row of ``v``.
    """
    v = np.atleast_2d(np.asarray(v, dtype=complex))
    out = np.empty(v.shape[0])
    hs = np.broadcast_to(np.asarray(0.0 if spec is None else spec.h, float), (v.shape[0],))
    for i, vi in enumerate(v):
        sp = None if spec is None else spec.replace(p=np.zeros(v.shape[1]), h=float(hs[i]))
        out[i] = wirtinger_jacobian(red, vi, sp).m_tilde_inv_norm()
    return out


def effective_real_jacobian(red, v, spec: InjectionSpec | None = None) -> np.ndarray:
    """Real ``2n x 2n`` Jacobian of the residual ``F(v) - s_g(v)`` for a batch of ``v``."""
    y, b = _yb(red)
    v = np.atleast_2d(np.asarray(v, dtype=complex))
    m, n = v.shape
    if spec is None:
        gmag = np.zeros((m, n))
        vv = _pack_voltvar((None,) * n)
    else:
        gmag = _pv_gain(spec, m)
        vv = spec._packed
    _, cur, sg, absv, slope = _mismatch(v, y, b, np.zeros((m, n)), gmag, vv)
    return _jacobian(v, y, cur, sg, absv, slope)


def load_direction(spec: InjectionSpec) -> np.ndarray:
    """``R = [I; diag(tan theta)]`` with ``tan theta`` zeroed off load buses."""
    n = spec.n
    tan = np.where(spec.load_mask, spec.tan_theta, 0.0)
    return np.vstack([np.eye(n), np.diag(tan)])


def log_volume_factor(red, v, spec: InjectionSpec) -> np.ndarray:
    """``log sqrt(det(DG^T DG))`` with ``DG = -J_eff^{-1} R``, batched over ``v``.

    The Gramian determinant is the squared product of the R-factor diagonal
    of a QR decomposition of ``DG``.
    """
    v = np.atleast_2d(np.asarray(v, dtype=complex))
    jac = effective_real_jacobian(red, v, spec)
    r = load_direction(spec)
    try:
        dg = -np.linalg.solve(jac, np.broadcast_to(r, (v.shape[0],) + r.shape))
    except np.linalg.LinAlgError as exc:
        raise VoltageStabilityError("effective Jacobian singular; volume factor undefined") from exc
    if not np.all(np.isfinite(dg)):
        raise VoltageStabilityError("effective Jacobian singular; volume factor undefined")
    rr = np.linalg.qr(dg, mode="r")
    diag = np.abs(np.diagonal(rr, axis1=-2, axis2=-1))
    if np.any(diag == 0):
        raise NumericalError("load-to-voltage map is rank deficient")
    return np.log(diag).sum(axis=-1)


def volume_factor(red, v, spec: InjectionSpec) -> float | np.ndarray:
    """Surface volume factor ``|J_Y(v)| = sqrt(det(DG^T DG))``."""
    out = np.exp(log_volume_factor(red, v, spec))
    return float(out[0]) if np.ndim(v) == 1 else out


# -- feasibility audit ------------------------------------------------------

@dataclass(frozen=True)
class FeasibilityReport:
    """Sampled evidence for the three operating assumptions.

    (i) ``min_sigma_jacobian``: smallest singular value of the effective real
    Jacobian over sampled good-set voltages. (ii) ``envelope_fraction``: share
    of sampled good-set voltages whose implied loads lie inside every class
    margin. (iii) ``voltvar_ok``: per pv bus, ``|phi'| < 1/(gamma h_max)``.
    """

    n_samples: int
    n_in_good_set: int
    min_sigma_jacobian: float
    envelope_fraction: float
    voltvar_ok: dict
    voltvar_max_slope: dict
    rng_seed: int

    @property
    def stability_ok(self) -> bool:
        return bool(self.min_sigma_jacobian > 0)

    @property
    def passed(self) -> bool:
        return self.stability_ok and all(self.voltvar_ok.values())

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_in_good_set": self.n_in_good_set,
            "min_sigma_jacobian": self.min_sigma_jacobian,
            "stability_ok": self.stability_ok,
            "envelope_fraction": self.envelope_fraction,
            "voltvar_ok": self.voltvar_ok,
            "voltvar_max_slope": self.voltvar_max_slope,
            "passed": self.passed,
            "rng_seed": self.rng_seed,
        }


def feasibility_audit(
    red,
    spec: InjectionSpec,
    model,
    bus_ids,
    cfg: PowerFlowConfig | None = None,
    n_samples: int = 200,
    rng_seed: int = 0,
    h_max: float = 1.0,
) -> FeasibilityReport:
    """Sample operating points and check the operating assumptions.

    Loads are drawn from the *untruncated* per-class marginals of ``model``
    at a random time step (so the envelope check can fail), irradiance is
    uniform on ``[0, h_max]``; each draw is solved and kept if its voltages
    lie in the good set. ``bus_ids`` orders the retained buses.
    """
    cfg = cfg or PowerFlowConfig()
    rng = np.random.default_rng(rng_seed)
    index = {b: i for i, b in enumerate(bus_ids)}
    n = len(bus_ids)
    p = np.zeros((n_samples, n))
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    for cls in model.classes:
        cols = [index[b] for b in cls.members]
        t = rng.integers(0, cls.mu.size, size=n_samples)
        sd = np.sqrt(np.diag(cls.sigma_t))
        z = rng.standard_normal((n_samples, len(cols)))
        p[:, cols] = np.exp(cls.mu[t][:, None] + sd[t][:, None] * z)
        lo[cols] = cls.p_min
        hi[cols] = cls.p_max
    h = rng.uniform(0.0, h_max, size=n_samples)
    batch = spec.replace(p=p * spec.load_mask, h=h)
    traj = solve_powerflow_batch(red, batch, cfg)
    keep = traj.converged & traj.in_good_set
    vk = traj.v[keep]
    if vk.shape[0]:
        jac = effective_real_jacobian(red, vk, batch.replace(p=batch.p[keep], h=h[keep]))
        sig = np.linalg.svd(jac, compute_uv=False)[:, -1]
        min_sig = float(sig.min())
        pk = implied_active_load(red, vk, batch.replace(p=batch.p[keep], h=h[keep]))
        m = spec.load_mask
        inside = np.all((pk[:, m] >= lo[m] - 1e-12) & (pk[:, m] <= hi[m] + 1e-12), axis=1)
        frac = float(inside.mean())
    else:
        min_sig, frac = float("nan"), float("nan")
    net = red.network
    ok, slopes = {}, {}
    for k, c in enumerate(spec.voltvar):
        if c is None:
            continue
        s = c.max_abs_slope(net.v_min, net.v_max)
        g = spec.gamma[k] * h_max
        slopes[bus_ids[k]] = s
        ok[bus_ids[k]] = bool(s == 0 or s * g < 1.0)
    return FeasibilityReport(
        n_samples=n_samples,
        n_in_good_set=int(keep.sum()),
        min_sigma_jacobian=min_sig,
        envelope_fraction=frac,
        voltvar_ok=ok,
        voltvar_max_slope=slopes,
        rng_seed=rng_seed,
    )
