"""Small in-repo inputs: the 3-bus chain and a desk-scale radial feeder with
synthetic load shapes and an irradiance profile.

The reference feeder has a slack bus, two zero-injection trunks and 29
retained buses (25 loads, 4 PV inverters with volt-var) hanging off the
trunk on short laterals. Everything is generated deterministically.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from dpphasor.errors import InputError
from dpphasor.grid import Bus, Line, NetworkModel, save_feeder
from dpphasor.loads import LoadPanel, save_panel_csv
from dpphasor.voltvar import VoltVarCurve

REFERENCE_VOLTVAR = VoltVarCurve(((0.92, 0.3), (0.98, 0.0), (1.02, 0.0), (1.08, -0.3)))

# per-unit series impedances
TRUNK_Z = 0.0008 + 0.0016j
LATERAL_Z = 0.008 + 0.008j

# (level p.u., power-factor angle deg, shape) per class
CLASS_SPECS = (
    (0.030, 18.0, "residential"),
    (0.045, 25.0, "commercial"),
    (0.020, 12.0, "flat"),
)


def three_bus_feeder() -> NetworkModel:
    """Chain slack-z-load with unit admittances; the middle bus is eliminated."""
    return NetworkModel(
        buses=(
            Bus("1", "slack"),
            Bus("2", "zero-injection"),
            Bus("3", "load", class_id=0),
        ),
        lines=(Line("1", "2", 1.0 + 0j), Line("2", "3", 1.0 + 0j)),
    )


def reference_feeder() -> NetworkModel:
    """Slack, two 5-bus zero-injection trunks (z1..z5, z6..z10) leaving the
    substation, and 29 lateral buses (4 of them PV sites)."""
    buses = [Bus("src", "slack")]
    lines = []
    for k in range(1, 11):
        buses.append(Bus(f"z{k}", "zero-injection"))
        lines.append(Line("src" if k in (1, 6) else f"z{k - 1}", f"z{k}", 1 / TRUNK_Z))
    n_load = n_pv = 0
    for j in range(29):
        trunk = f"z{1 + j * 10 // 29}"
        if j % 7 == 3 and n_pv < 4:
            n_pv += 1
            bid = f"pv{n_pv}"
            buses.append(Bus(bid, "pv", gamma=0.05, voltvar=REFERENCE_VOLTVAR))
        else:
            ell = n_load % len(CLASS_SPECS)
            n_load += 1
            bid = f"b{n_load}"
            buses.append(Bus(bid, "load", class_id=ell, power_factor_deg=CLASS_SPECS[ell][1]))
        lines.append(Line(trunk, bid, 1 / LATERAL_Z))
    return NetworkModel(buses=tuple(buses), lines=tuple(lines))


def _shape(kind: str, T: int) -> np.ndarray:
    h = np.arange(T) * 24.0 / T
    if kind == "residential":
        s = 0.6 + 0.35 * np.exp(-((h - 7.5) / 1.5) ** 2) + 0.8 * np.exp(-((h - 19.0) / 2.5) ** 2)
    elif kind == "commercial":
        s = 0.45 + 0.9 / (1 + np.exp(-(h - 8.0) * 2)) / (1 + np.exp((h - 18.0) * 2))
    elif kind == "flat":
        s = 0.9 + 0.1 * np.cos(2 * np.pi * (h - 15.0) / 24)
    else:
        raise InputError(f"unknown load shape {kind!r}")
    return s / s.mean()


def reference_panel(network: NetworkModel | None = None, days: int = 730, T: int = 96,
                    seed: int = 0, sigma: float = 0.2, rho: float = 0.9) -> LoadPanel:
    """Log-normal load panel: per-class daily shape, a small per-bus level
    offset and stationary AR(1) noise within each day."""
    network = network or reference_feeder()
    rng = np.random.default_rng(seed)
    loads = [b for b in network.buses if b.kind == "load"]
    values = np.empty((len(loads), days * T))
    innov = sigma * np.sqrt(1 - rho**2)
    for i, (b, g) in enumerate(zip(loads, rng.spawn(len(loads)))):
        level, _, kind = CLASS_SPECS[(b.class_id or 0) % len(CLASS_SPECS)]
        mu = np.log(level * _shape(kind, T)) + 0.05 * g.standard_normal()
        e = np.empty((days, T))
        e[:, 0] = sigma * g.standard_normal(days)
        z = g.standard_normal((days, T))
        for t in range(1, T):
            e[:, t] = rho * e[:, t - 1] + innov * z[:, t]
        values[i] = np.exp(mu + e).ravel()
    return LoadPanel(values, tuple(b.id for b in loads), 24 * 60 // T)


def reference_irradiance(T: int = 96) -> np.ndarray:
    """Clear-sky bell between 6:00 and 18:00, peak 1."""
    h = np.arange(T) * 24.0 / T
    return np.clip(np.sin(np.pi * (h - 6.0) / 12.0), 0.0, None) ** 1.5


def save_irradiance_csv(h, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_index", "h_g"])
        for t, x in enumerate(np.asarray(h, float)):
            w.writerow([t, "%.17g" % x])


def load_irradiance_csv(path) -> np.ndarray:
    try:
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        h = np.array([float(r["h_g"]) for r in sorted(rows, key=lambda r: int(r["time_index"]))])
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read irradiance {path}: {exc}") from exc
    if h.size == 0 or np.any(h < 0) or not np.all(np.isfinite(h)):
        raise InputError("irradiance must be a nonempty, finite, nonnegative series")
    return h


REFERENCE_EXPERIMENT = {
    "feeder": "feeder.json",
    "panel": "loads.csv",
    "irradiance": "irradiance.csv",
    "eps_grid": [25, 30, 50, 100, 200],
    "delta": 1e-3,
    "r": 2e-7,
    "days": 7,
    "repetitions": 20,
    "seed": 0,
    "n_classes": 3,
}


def write_reference_inputs(out_dir, days: int = 730, seed: int = 0) -> dict:
    """Write feeder, panel, irradiance and an experiment config to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = reference_feeder()
    save_feeder(net, out / "feeder.json")
    save_panel_csv(reference_panel(net, days=days, seed=seed), out / "loads.csv")
    save_irradiance_csv(reference_irradiance(), out / "irradiance.csv")
    cfg = dict(REFERENCE_EXPERIMENT, output_dir=str(out / "results"))
    (out / "experiment.json").write_text(json.dumps(cfg, indent=2) + "\n")
    return cfg


def data_path(name: str) -> Path:
    """Path of a file shipped in ``dpphasor/data`` (e.g. ``three_bus.json``)."""
    p = Path(__file__).with_name("data") / name
    if not p.exists():
        raise InputError(f"no shipped data file {name!r}")
    return p
