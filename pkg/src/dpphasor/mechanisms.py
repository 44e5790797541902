"""The proposed voltage release and the Gaussian output-perturbation baselines.

Every mechanism returns a :class:`MechanismRelease` holding ``(days, T, n)``
complex retained-bus voltages and its budget tag. Per-day budgets compose
linearly over days.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dpphasor.accountant import gaussian_voltage_sigma, noisy_load_sigma
from dpphasor.errors import InputError, PowerFlowError
from dpphasor.loads import LoadClassModel, TruncationStats, sample_truncated_loads
from dpphasor.powerflow import InjectionSpec, PowerFlowConfig, solve_powerflow_batch


class MechanismKind(str, enum.Enum):
    DP_POWERFLOW = "dp_powerflow"
    NOISE_FREE = "noise_free"
    JOINT_VOLTAGE_NOISE = "joint_voltage_noise"
    DPGMM_PLUS_GAUSS = "dpgmm_plus_gauss"
    NOISY_LOADS_PLUS_GAUSS = "noisy_loads_plus_gauss"


@dataclass(frozen=True)
class MechanismRelease:
    voltages: np.ndarray
    kind: MechanismKind
    eps_day: float
    delta_day: float
    bus_ids: tuple[str, ...]
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.voltages, dtype=complex)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[2] != len(self.bus_ids):
            raise InputError("voltages must have shape (days, T, n) matching bus_ids")
        object.__setattr__(self, "voltages", v)
        object.__setattr__(self, "kind", MechanismKind(self.kind))
        object.__setattr__(self, "bus_ids", tuple(self.bus_ids))

    @property
    def days(self) -> int:
        return self.voltages.shape[0]

    @property
    def T(self) -> int:
        return self.voltages.shape[1]

    @property
    def eps_total(self) -> float:
        return compose_budget((self.eps_day, self.delta_day), self.days)[0]

    @property
    def delta_total(self) -> float:
        return compose_budget((self.eps_day, self.delta_day), self.days)[1]

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.voltages)

    def sidecar(self) -> dict:
        return {
            "mechanism": self.kind.value,
            "eps_day": _num(self.eps_day),
            "delta_day": self.delta_day,
            "eps_total": _num(self.eps_total),
            "delta_total": self.delta_total,
            "days": self.days,
            "T": self.T,
            "bus_ids": list(self.bus_ids),
            "seed": self.seed,
            "metadata": _plain(self.metadata),
        }


def _num(x: float):
    return "inf" if math.isinf(x) else x


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return _num(float(x))
    return x


def compose_budget(per_day, days: int):
    """Basic composition: ``(d eps, d delta)``."""
    if days < 1:
        raise InputError("days must be at least 1")
    eps, delta = per_day
    return days * eps, days * delta


# -- shared plumbing --------------------------------------------------------

def spec_with_class_power_factors(spec: InjectionSpec, model: LoadClassModel, bus_ids) -> InjectionSpec:
    """Override ``tan(theta)`` at class members with the class power factor."""
    tan = spec.tan_theta.copy()
    index = {b: i for i, b in enumerate(bus_ids)}
    for c in model.classes:
        for m in c.members:
            tan[index[m]] = c.tan_theta
    return spec.replace(tan_theta=tan)


def draw_daily_loads(model: LoadClassModel, bus_ids, days: int, rng: np.random.Generator,
                     load_mask=None, stats: TruncationStats | None = None) -> np.ndarray:
    """Synthetic active loads ``(days, T, n)`` from the fitted class model.

    Buses outside every class get zero load. Each class draws from its own
    spawned stream.
    """
    index = {b: i for i, b in enumerate(bus_ids)}
    n = len(bus_ids)
    out = np.zeros((days, model.T, n))
    for cls, g in zip(model.classes, rng.spawn(len(model.classes))):
        cols = [index[m] for m in cls.members]
        x = sample_truncated_loads(cls, len(cols), g, n_days=days, stats=stats)  # (days, |C|, T)
        out[:, :, cols] = np.swapaxes(x, 1, 2)
    if load_mask is not None and np.any(out[..., ~np.asarray(load_mask)] != 0):
        raise InputError("load model assigns load to a non-load bus")
    return out


def daily_irradiance(h_series, days: int, T: int) -> np.ndarray:
    """Broadcast a scalar, a ``T`` profile or a ``days*T`` series to ``(days, T)``."""
    h = np.asarray(h_series, float).ravel()
    if h.size == 1:
        return np.full((days, T), h[0])
    if h.size == T:
        return np.tile(h, (days, 1))
    if h.size == days * T:
        return h.reshape(days, T)
    raise InputError("irradiance series must have length 1, T or days*T")


def solve_days(red, spec: InjectionSpec, loads: np.ndarray, h_series, cfg: PowerFlowConfig | None = None):
    """Solve ``(days, T, n)`` loads. Returns ``(voltages, ok_days, info)``.

    A day with any failed step is dropped whole; ``info`` lists failures and
    the number of released steps outside the good set.
    """
    days, T, n = loads.shape
    h = daily_irradiance(h_series, days, T)
    flat = spec.replace(p=loads.reshape(days * T, n), h=np.ascontiguousarray(h).ravel())
    traj = solve_powerflow_batch(red, flat, cfg)
    ok_steps = traj.converged.reshape(days, T)
    ok_days = ok_steps.all(axis=1)
    v = traj.v.reshape(days, T, n)[ok_days]
    good = traj.in_good_set.reshape(days, T)[ok_days]
    info = {
        "failed_days": [int(d) for d in np.flatnonzero(~ok_days)],
        "failed_steps": int((~ok_steps).sum()),
        "outside_good_set": int((~good).sum()),
        "max_residual": float(traj.residual.reshape(days, T)[ok_days].max()) if ok_days.any() else math.nan,
    }
    if not ok_days.any():
        raise PowerFlowError("power flow failed on every day; nothing to release",
                             residual=float(np.nanmax(traj.residual)))
    return v, ok_days, info


def _add_voltage_noise(v: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return v.copy()
    noise = rng.normal(0.0, sigma, size=v.shape + (2,))
    return v + noise[..., 0] + 1j * noise[..., 1]


# -- mechanisms ---------------------------------------------------------------

def release_noise_free(red, spec: InjectionSpec, loads: np.ndarray, h_series, bus_ids,
                       cfg: PowerFlowConfig | None = None) -> MechanismRelease:
    """Replay historical loads ``(days, T, n)`` through the true network."""
    v, _, info = solve_days(red, spec, loads, h_series, cfg)
    return MechanismRelease(v, MechanismKind.NOISE_FREE, math.inf, 0.0, bus_ids, None, info)


def release_dp_powerflow(red, model: LoadClassModel, spec: InjectionSpec, bus_ids, h_series, days: int,
                         rng: np.random.Generator, cfg: PowerFlowConfig | None = None,
                         eps_day: float = math.nan, delta_day: float = math.nan,
                         seed: int | None = None) -> MechanismRelease:
    """Sample truncated synthetic loads from ``model`` and solve power flow on
    the true network; no noise is added to the voltages.

    Only the fitted model enters here, never historical loads. ``eps_day``
    and ``delta_day`` are the accountant's guarantee for one day.
    """
    stats = TruncationStats()
    sp = spec_with_class_power_factors(spec, model, bus_ids)
    loads = draw_daily_loads(model, bus_ids, days, rng, sp.load_mask, stats)
    v, _, info = solve_days(red, sp, loads, h_series, cfg)
    info["truncation_acceptance"] = stats.acceptance
    info["pilot_acceptance"] = dict(stats.pilot_acceptance)
    return MechanismRelease(v, MechanismKind.DP_POWERFLOW, eps_day, delta_day, bus_ids, seed, info)


def release_gaussian_voltage(base: MechanismRelease, delta2: float, eps: float, delta: float,
                             rng: np.random.Generator, kind: MechanismKind | None = None,
                             eps_tag: float | None = None) -> MechanismRelease:
    """Add i.i.d. Gaussian noise to Re and Im of every released voltage.

    Per-coordinate ``sigma = sqrt(T) Delta_2 sqrt(2 ln(1.25/delta)) / eps``.
    """
    sigma = gaussian_voltage_sigma(delta2, eps, delta, base.T)
    v = _add_voltage_noise(base.voltages, sigma, rng)
    meta = dict(base.metadata)
    meta["voltage_sigma"] = sigma
    return replace(
        base,
        voltages=v,
        kind=kind or base.kind,
        eps_day=eps if eps_tag is None else eps_tag,
        delta_day=delta,
        metadata=meta,
    )


def release_joint_voltage(noise_free: MechanismRelease, delta2_y: float, delta2_load: float,
                          eps: float, eps_load: float, delta: float, rng: np.random.Generator) -> MechanismRelease:
    """One Gaussian mechanism on true voltages at ``max`` of the two
    sensitivities and budget ``min(eps_load, eps)``."""
    eps_joint = min(eps_load, eps)
    return release_gaussian_voltage(
        noise_free, max(delta2_y, delta2_load), eps_joint, delta, rng, MechanismKind.JOINT_VOLTAGE_NOISE
    )


def release_dpgmm_plus_gauss(red, model, spec, bus_ids, h_series, days, delta2_y: float, eps_y: float,
                             delta_y: float, rng: np.random.Generator, cfg=None, seed=None,
                             base: MechanismRelease | None = None) -> MechanismRelease:
    """Proposed sampling followed by voltage noise calibrated to ``Delta_2^(Y)``.

    Passing ``base`` (a ``dp_powerflow`` release) reuses its voltages, which
    gives common random numbers across the two mechanisms.
    """
    if base is None:
        base = release_dp_powerflow(red, model, spec, bus_ids, h_series, days, rng, cfg, seed=seed)
    return release_gaussian_voltage(base, delta2_y, eps_y, delta_y, rng, MechanismKind.DPGMM_PLUS_GAUSS)


def release_noisy_loads_plus_gauss(red, spec: InjectionSpec, loads: np.ndarray, h_series, bus_ids,
                                   p_lo, p_hi, delta_load: float, eps_load: float, delta_load_dp: float,
                                   delta2_y: float, eps_y: float, delta_y: float,
                                   rng: np.random.Generator, cfg=None, n_l: int | None = None) -> MechanismRelease:
    """Gaussian noise on every historical load entry, clipped to the margins,
    solved on the true network, then voltage noise at ``Delta_2^(Y)``."""
    days, T, n = loads.shape
    mask = spec.load_mask
    n_l = int(mask.sum()) if n_l is None else n_l
    s_load = noisy_load_sigma(n_l, T, delta_load, eps_load, delta_load_dp)
    noisy = loads.copy()
    if s_load > 0:
        noisy[..., mask] = loads[..., mask] + rng.normal(0.0, s_load, size=loads[..., mask].shape)
    lo = np.broadcast_to(np.asarray(p_lo, float), (n,))
    hi = np.broadcast_to(np.asarray(p_hi, float), (n,))
    noisy[..., mask] = np.clip(noisy[..., mask], lo[mask], hi[mask])
    v, _, info = solve_days(red, spec, noisy, h_series, cfg)
    info["load_sigma"] = s_load
    base = MechanismRelease(v, MechanismKind.NOISY_LOADS_PLUS_GAUSS, eps_y, delta_y, bus_ids, None, info)
    out = release_gaussian_voltage(base, delta2_y, eps_y, delta_y, rng)
    return out


# -- I/O ----------------------------------------------------------------------

def write_release(release: MechanismRelease, out_dir) -> list[Path]:
    """One CSV per day (``time_index,bus_id,v_re,v_im``) plus ``release.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for d in range(release.days):
        p = out / f"day_{d:03d}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_index", "bus_id", "v_re", "v_im"])
            for t in range(release.T):
                for k, b in enumerate(release.bus_ids):
                    z = release.voltages[d, t, k]
                    w.writerow([t, b, "%.17g" % z.real, "%.17g" % z.imag])
        paths.append(p)
    side = out / "release.json"
    side.write_text(json.dumps(release.sidecar(), indent=2, sort_keys=True) + "\n")
    paths.append(side)
    return paths


def read_release(out_dir) -> MechanismRelease:
    out = Path(out_dir)
    try:
        meta = json.loads((out / "release.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read release sidecar in {out}: {exc}") from exc
    bus_ids = tuple(meta["bus_ids"])
    index = {b: i for i, b in enumerate(bus_ids)}
    days, T = int(meta["days"]), int(meta["T"])
    v = np.zeros((days, T, len(bus_ids)), dtype=complex)
    for d in range(days):
        with (out / f"day_{d:03d}.csv").open(newline="") as fh:
            rows = csv.reader(fh)
            next(rows)
            for t, b, re_, im_ in rows:
                v[d, int(t), index[b]] = complex(float(re_), float(im_))
    eps = meta["eps_day"]
    return MechanismRelease(
        v,
        MechanismKind(meta["mechanism"]),
        math.inf if eps == "inf" else float(eps),
        float(meta["delta_day"]),
        bus_ids,
        meta.get("seed"),
        meta.get("metadata", {}),
    )
