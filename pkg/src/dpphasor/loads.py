"""Load classes, differentially private log-normal fit and truncated sampling.

Each class of load buses shares a log-space Gaussian model over one day of
``T`` steps. Synthetic daily trajectories are drawn from that Gaussian
conditioned on every entry lying inside the class loading envelope.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from sklearn.cluster import KMeans

from dpphasor.errors import InputError, SamplingError

PILOT_DRAWS = 1000
MIN_ACCEPTANCE = 1e-4
MARGIN_WIDEN = 0.1


# -- panel ------------------------------------------------------------------

@dataclass(frozen=True)
class LoadPanel:
    """Historical active loads, one row per load bus.

    ``values`` has shape ``(n_L, days * T)`` with ``T = 1440 / resolution``
    steps per day; entries must be strictly positive.
    """

    values: np.ndarray
    bus_ids: tuple[str, ...]
    resolution_minutes: int = 15

    def __post_init__(self):
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        ids = tuple(str(b) for b in self.bus_ids)
        if vals.shape[0] != len(ids):
            raise InputError(f"{vals.shape[0]} panel rows but {len(ids)} bus ids")
        if vals.shape[1] < 1:
            raise InputError("panel needs at least one time step")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise InputError("panel loads must be finite and strictly positive")
        if self.resolution_minutes <= 0 or 1440 % self.resolution_minutes:
            raise InputError("resolution must divide a day")
        if vals.shape[1] % self.steps_per_day:
            raise InputError(
                f"panel length {vals.shape[1]} is not a whole number of {self.steps_per_day}-step days"
            )
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "bus_ids", ids)

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.resolution_minutes

    @property
    def n_buses(self) -> int:
        return self.values.shape[0]

    @property
    def n_days(self) -> int:
        return self.values.shape[1] // self.steps_per_day

    def daily(self) -> np.ndarray:
        """Loads reshaped to ``(n_L, days, T)``."""
        return self.values.reshape(self.n_buses, self.n_days, self.steps_per_day)

    def day(self, d: int) -> np.ndarray:
        """``(T, n_L)`` loads of day ``d``."""
        return self.daily()[:, d, :].T

    def subset(self, bus_ids) -> "LoadPanel":
        idx = [self.bus_ids.index(b) for b in bus_ids]
        return LoadPanel(self.values[idx], tuple(bus_ids), self.resolution_minutes)


def load_panel_csv(path, resolution_minutes: int | None = None) -> LoadPanel:
    """Read a panel CSV: first column index/timestamp, one column per bus.

    The resolution comes from the argument, else from ``<path>.meta.json``
    (key ``resolution_minutes``), else defaults to 15 minutes.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read panel {path}: {exc}") from exc
    if len(rows) < 2:
        raise InputError(f"panel {path} has no data rows")
    header = rows[0]
    try:
        data = np.array([[float(x) for x in r[1:]] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise InputError(f"panel {path}: non-numeric entry ({exc})") from exc
    if resolution_minutes is None:
        meta = path.with_name(path.name + ".meta.json")
        resolution_minutes = 15
        if meta.exists():
            resolution_minutes = int(json.loads(meta.read_text()).get("resolution_minutes", 15))
    return LoadPanel(data.T, tuple(header[1:]), resolution_minutes)


def save_panel_csv(panel: LoadPanel, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_index", *panel.bus_ids])
        for t, row in enumerate(panel.values.T):
            w.writerow([t, *("%.17g" % x for x in row)])
    meta = path.with_name(path.name + ".meta.json")
    meta.write_text(json.dumps({"resolution_minutes": panel.resolution_minutes}, indent=2) + "\n")


# -- model ------------------------------------------------------------------

@dataclass(frozen=True)
class LoadClass:
    """One load class: log-space daily mean/covariance, power factor, margins."""

    class_id: int
    mu: np.ndarray
    sigma_t: np.ndarray
    theta_deg: float
    p_min: float
    p_max: float
    members: tuple[str, ...]
    margins_source: str = "user"

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        sig = np.atleast_2d(np.asarray(self.sigma_t, dtype=float))
        if sig.shape != (mu.size, mu.size):
            raise InputError("covariance shape does not match the mean")
        if not np.allclose(sig, sig.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sig).max())):
            raise InputError("covariance must be symmetric")
        if np.linalg.eigvalsh(sig).min() <= 0:
            raise InputError("covariance must be positive definite")
        if not 0 < self.p_min < self.p_max:
            raise InputError(f"class {self.class_id}: require 0 < p_min < p_max")
        if not -90 < self.theta_deg < 90:
            raise InputError("power factor angle must lie in (-90, 90) degrees")
        if len(self.members) < 1:
            raise InputError(f"class {self.class_id} has no members")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma_t", 0.5 * (sig + sig.T))
        object.__setattr__(self, "members", tuple(str(m) for m in self.members))

    @property
    def T(self) -> int:
        return self.mu.size

    @property
    def tan_theta(self) -> float:
        return math.tan(math.radians(self.theta_deg))

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "mu": self.mu.tolist(),
            "sigma_t": self.sigma_t.ravel().tolist(),
            "T": self.T,
            "theta_deg": self.theta_deg,
            "p_min": self.p_min,
            "p_max": self.p_max,
            "members": list(self.members),
            "margins_source": self.margins_source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoadClass":
        T = int(d["T"])
        return cls(
            class_id=int(d["class_id"]),
            mu=np.array(d["mu"], dtype=float),
            sigma_t=np.array(d["sigma_t"], dtype=float).reshape(T, T),
            theta_deg=float(d["theta_deg"]),
            p_min=float(d["p_min"]),
            p_max=float(d["p_max"]),
            members=tuple(d["members"]),
            margins_source=d.get("margins_source", "user"),
        )


@dataclass(frozen=True)
class LoadClassModel:
    classes: tuple[LoadClass, ...]
    resolution_minutes: int = 15
    eps_load: float = math.inf
    delta_load: float = 0.0
    fitter: str = "gaussian-mechanism"

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        seen = [m for c in self.classes for m in c.members]
        if len(set(seen)) != len(seen):
            raise InputError("a bus belongs to more than one class")
        if len({c.T for c in self.classes}) > 1:
            raise InputError("all classes must share the same horizon T")

    @property
    def T(self) -> int:
        return self.classes[0].T

    @property
    def members(self) -> tuple[str, ...]:
        return tuple(m for c in self.classes for m in c.members)

    def class_of(self, bus_id: str) -> LoadClass:
        for c in self.classes:
            if bus_id in c.members:
                return c
        raise KeyError(bus_id)

    def to_dict(self) -> dict:
        return {
            "resolution_minutes": self.resolution_minutes,
            "eps_load": None if math.isinf(self.eps_load) else self.eps_load,
            "delta_load": self.delta_load,
            "fitter": self.fitter,
            "classes": [c.to_dict() for c in self.classes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoadClassModel":
        try:
            eps = d.get("eps_load")
            return cls(
                classes=tuple(LoadClass.from_dict(c) for c in d["classes"]),
                resolution_minutes=int(d.get("resolution_minutes", 15)),
                eps_load=math.inf if eps is None else float(eps),
                delta_load=float(d.get("delta_load", 0.0)),
                fitter=d.get("fitter", "gaussian-mechanism"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"malformed load model: {exc!r}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "LoadClassModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read load model {path}: {exc}") from exc


# -- DP fit -----------------------------------------------------------------

@dataclass(frozen=True)
class DpFitConfig:
    """Budget and clipping for the private class fit.

    ``clip_log`` overrides the per-class clip box ``[log p_min, log p_max]``.
    ``mean_fraction`` of (eps, delta) goes to the mean, the rest to the
    second moment. With ``noise_floor`` the covariance eigenvalue floor is
    raised to ``2 sigma_noise sqrt(T)``, the typical spectral norm of the
    second-moment noise, so directions the noise has swamped are not
    reported as near-deterministic.
    """

    eps_load: float = math.inf
    delta_load: float = 1e-5
    clip_log: tuple[float, float] | None = None
    mean_fraction: float = 0.5
    eigen_floor: float = 1e-6
    noise_floor: bool = False

    def __post_init__(self):
        if not self.eps_load > 0:
            raise InputError("eps_load must be positive (or inf)")
        if not 0 < self.delta_load < 1:
            raise InputError("delta_load must lie in (0, 1)")
        if not 0 < self.mean_fraction < 1:
            raise InputError("budget fractions must lie in (0, 1) and sum to 1")
        if self.clip_log is not None and not self.clip_log[0] < self.clip_log[1]:
            raise InputError("clip bounds must be increasing")
        if not self.eigen_floor > 0:
            raise InputError("eigen_floor must be positive")

    @property
    def cov_fraction(self) -> float:
        return 1.0 - self.mean_fraction


def gaussian_sigma(sensitivity: float, eps: float, delta: float) -> float:
    """Classical Gaussian-mechanism scale ``Delta sqrt(2 ln(1.25/delta)) / eps``."""
    if math.isinf(eps):
        return 0.0
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / eps


def project_psd(sigma: np.ndarray, floor: float) -> np.ndarray:
    sym = 0.5 * (sigma + sigma.T)
    w, q = np.linalg.eigh(sym)
    out = (q * np.maximum(w, floor)) @ q.T
    return 0.5 * (out + out.T)


class LoadModelFitter(Protocol):
    """Anything that turns clipped log-profiles into a private (mu, Sigma)."""

    name: str

    def fit(self, log_profiles: np.ndarray, clip: tuple[float, float], cfg: DpFitConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class GaussianMechanismFitter:
    """Noised mean and noised second moment about the clip-box centre.

    With ``m`` records clipped to ``[a, b]^T`` (width ``w = b - a``):

    * mean sensitivity ``w sqrt(T) / m`` (clip-box diameter over count);
    * second-moment sensitivity ``T w^2 / (2 m)`` in Frobenius norm.

    Noise draw order from ``rng``: the ``T`` mean coordinates, then the
    upper triangle (row-major, diagonal included) of the second moment,
    mirrored to keep it symmetric. The covariance is the noised second
    moment minus the outer product of the noised centred mean, projected to
    the PSD cone with an eigenvalue floor.
    """

    name: str = "gaussian-mechanism"

    def fit(self, log_profiles, clip, cfg, rng):
        x = np.asarray(log_profiles, dtype=float)
        m, T = x.shape
        a, b = clip
        x = np.clip(x, a, b)
        c = 0.5 * (a + b)
        w = b - a
        xc = x - c
        mean_c = xc.mean(axis=0)
        second = xc.T @ xc / m
        eps_m = cfg.eps_load * cfg.mean_fraction
        eps_s = cfg.eps_load * cfg.cov_fraction
        s_mean = gaussian_sigma(w * math.sqrt(T) / m, eps_m, cfg.delta_load * cfg.mean_fraction)
        s_sec = gaussian_sigma(T * w * w / (2.0 * m), eps_s, cfg.delta_load * cfg.cov_fraction)
        if s_mean > 0:
            mean_c = mean_c + rng.normal(0.0, s_mean, size=T)
        if s_sec > 0:
            iu = np.triu_indices(T)
            noise = np.zeros((T, T))
            noise[iu] = rng.normal(0.0, s_sec, size=iu[0].size)
            noise = noise + np.triu(noise, 1).T
            second = second + noise
        sigma = second - np.outer(mean_c, mean_c)
        floor = cfg.eigen_floor
        if cfg.noise_floor:
            floor = max(floor, 2.0 * s_sec * math.sqrt(T))
        return mean_c + c, project_psd(sigma, floor)


def fit_dp_gaussian(log_profiles, cfg: DpFitConfig, rng: np.random.Generator,
                    clip: tuple[float, float] | None = None,
                    fitter: LoadModelFitter | None = None):
    """Private (mu, Sigma_T) of one class from its ``(m, T)`` log-profiles."""
    x = np.atleast_2d(np.asarray(log_profiles, dtype=float))
    if x.shape[0] < 2:
        raise InputError("need at least two profiles to fit a class")
    clip = cfg.clip_log or clip
    if clip is None:
        raise InputError("clip bounds required (set DpFitConfig.clip_log or pass margins)")
    return (fitter or GaussianMechanismFitter()).fit(x, clip, cfg, rng)


# -- partition --------------------------------------------------------------

def partition_classes(panel: LoadPanel, L: int, rng_seed: int = 0) -> np.ndarray:
    """k-means (100 restarts) on per-bus mean daily log-profiles.

    Labels are renumbered in order of first appearance, so the output does
    not depend on the arbitrary cluster numbering.
    """
    if not 1 <= L <= panel.n_buses:
        raise InputError(f"need 1 <= L <= {panel.n_buses} classes, got {L}")
    feats = np.log(panel.daily()).mean(axis=1)
    if L == 1:
        return np.zeros(panel.n_buses, dtype=int)
    if L == panel.n_buses:
        return np.arange(panel.n_buses)
    km = KMeans(n_clusters=L, n_init=100, random_state=rng_seed).fit(feats)
    return _canonical_labels(km.labels_)


def _canonical_labels(labels) -> np.ndarray:
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    return np.array([order[int(lab)] for lab in labels])


def default_margins(values: np.ndarray, widen: float = MARGIN_WIDEN) -> tuple[float, float]:
    """Observed min/max widened multiplicatively by ``widen``."""
    return float(values.min() * (1 - widen)), float(values.max() * (1 + widen))


def fit_load_model(
    panel: LoadPanel,
    L: int,
    cfg: DpFitConfig,
    rng_seed: int = 0,
    theta_deg: dict | None = None,
    assignment: dict | None = None,
    margins: dict | None = None,
    fitter: LoadModelFitter | None = None,
) -> LoadClassModel:
    """Partition, then fit each class privately.

    ``assignment`` (bus id -> class id) skips the partition step.
    ``margins`` maps class id -> (p_min, p_max); missing classes use the
    observed range widened by 10% (flagged ``observed+10%``). ``theta_deg``
    maps bus id -> power-factor angle; a class takes its members' mean.
    """
    if assignment is None:
        labels = partition_classes(panel, L, rng_seed)
    else:
        labels = _canonical_labels([assignment[b] for b in panel.bus_ids])
    theta_deg = theta_deg or {}
    margins = margins or {}
    ss = np.random.SeedSequence(rng_seed)
    streams = ss.spawn(int(labels.max()) + 1)
    daily = panel.daily()
    classes = []
    for ell in range(int(labels.max()) + 1):
        idx = np.flatnonzero(labels == ell)
        members = tuple(panel.bus_ids[i] for i in idx)
        profiles = daily[idx].reshape(-1, panel.steps_per_day)
        if ell in margins:
            p_min, p_max = map(float, margins[ell])
            source = "user"
        else:
            p_min, p_max = default_margins(profiles)
            source = "observed+10%"
        mu, sig = fit_dp_gaussian(
            np.log(profiles), cfg, np.random.default_rng(streams[ell]),
            clip=(math.log(p_min), math.log(p_max)), fitter=fitter,
        )
        theta = float(np.mean([theta_deg.get(m, 0.0) for m in members]))
        classes.append(LoadClass(ell, mu, sig, theta, p_min, p_max, members, source))
    return LoadClassModel(
        tuple(classes), panel.resolution_minutes, cfg.eps_load, cfg.delta_load,
        (fitter or GaussianMechanismFitter()).name,
    )


# -- sampling ---------------------------------------------------------------

@dataclass
class TruncationStats:
    draws: int = 0
    accepted: int = 0
    pilot_acceptance: dict = field(default_factory=dict)

    @property
    def acceptance(self) -> float:
        return self.accepted / self.draws if self.draws else float("nan")


def _cholesky(sigma):
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise InputError("class covariance is not positive definite") from exc


def sample_truncated_loads(
    cls: LoadClass,
    n_buses: int,
    rng: np.random.Generator,
    n_days: int = 1,
    stats: TruncationStats | None = None,
) -> np.ndarray:
    """Draw ``(n_days, n_buses, T)`` loads, i.i.d. truncated log-normal.

    Each bus gets its own spawned stream, so results do not depend on the
    order in which buses are processed. A 1000-draw pilot estimates the
    acceptance rate; below ``1e-4`` a :class:`SamplingError` is raised.
    """
    lo, hi = math.log(cls.p_min), math.log(cls.p_max)
    chol = _cholesky(cls.sigma_t)
    T = cls.T
    pilot_rng, *bus_rngs = rng.spawn(n_buses + 1)

    def draw(g, k):
        return cls.mu + g.standard_normal((k, T)) @ chol.T

    pilot = draw(pilot_rng, PILOT_DRAWS)
    acc = float(np.mean(np.all((pilot >= lo) & (pilot <= hi), axis=1)))
    if stats is not None:
        stats.pilot_acceptance[cls.class_id] = acc
    if acc < MIN_ACCEPTANCE:
        raise SamplingError(
            f"class {cls.class_id}: estimated truncation acceptance {acc:.2e} < {MIN_ACCEPTANCE:g}; "
            "widen the load margins [p_min, p_max]"
        )
    out = np.empty((n_days, n_buses, T))
    for j, g in enumerate(bus_rngs):
        got = []
        need = n_days
        while need > 0:
            batch = max(8, int(math.ceil(1.2 * need / acc)))
            x = draw(g, batch)
            ok = np.all((x >= lo) & (x <= hi), axis=1)
            if stats is not None:
                stats.draws += batch
                stats.accepted += int(ok.sum())
            got.append(x[ok][:need])
            need -= got[-1].shape[0]
        out[:, j, :] = np.concatenate(got)[:n_days]
    loads = np.exp(out)
    # exp/log round-off can leave a value an ulp outside the box
    return np.clip(loads, cls.p_min, cls.p_max)


def reactive_from_active(p, theta_deg):
    """``q = tan(theta) p`` at a fixed power-factor angle."""
    theta_deg = np.asarray(theta_deg, dtype=float)
    if np.any(np.abs(theta_deg) >= 90):
        raise InputError("power-factor angle must lie in (-90, 90) degrees")
    return np.tan(np.deg2rad(theta_deg)) * np.asarray(p, dtype=float)


def pv_injection(gamma, h, phi_angle):
    """Inverter injection ``gamma h exp(j phi)``."""
    gamma = np.asarray(gamma, dtype=float)
    h = np.asarray(h, dtype=float)
    if np.any(gamma < 0) or np.any(h < 0):
        raise InputError("pv capacity and irradiance must be nonnegative")
    return gamma * h * np.exp(1j * np.asarray(phi_angle, dtype=float))
