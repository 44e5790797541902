"""Feeder description, nodal admittance assembly and Kron reduction.

All matrices are dense complex per-unit arrays. Bus ordering inside a
:class:`FullAdmittance` follows the order of ``NetworkModel.buses``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from dpphasor.errors import (
    DisconnectedNetworkError,
    InputError,
    SingularZeroBlockError,
)
from dpphasor.voltvar import VoltVarCurve

BUS_KINDS = ("slack", "load", "pv", "zero-injection")

# |Y_kj| below this fraction of ||Y||_F counts as a structural zero
STRUCTURAL_ZERO_RTOL = 1e-12


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str
    class_id: int | None = None
    gamma: float = 0.0
    power_factor_deg: float = 0.0
    voltvar: VoltVarCurve | None = None

    def __post_init__(self):
        if self.kind not in BUS_KINDS:
            raise InputError(f"bus {self.id!r}: unknown kind {self.kind!r}")
        if self.gamma < 0:
            raise InputError(f"bus {self.id!r}: pv capacity must be nonnegative")
        if self.kind == "load" and not -90.0 < self.power_factor_deg < 90.0:
            raise InputError(f"bus {self.id!r}: power factor angle must be in (-90, 90) deg")
        if self.kind != "pv" and (self.gamma or self.voltvar is not None):
            raise InputError(f"bus {self.id!r}: only pv buses carry capacity or volt-var")


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    series_admittance: complex
    shunt_admittance: complex = 0j
    closed: bool = True


@dataclass(frozen=True)
class NetworkModel:
    """Single-phase equivalent feeder.

    ``shunt_admittance`` on a line is the total line charging; half of it is
    attached to each end (pi model).
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    slack_voltage: complex = 1.0 + 0.0j
    v_min: float = 0.95
    v_max: float = 1.05

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate bus ids")
        slacks = [b for b in self.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise InputError(f"exactly one slack bus required, found {len(slacks)}")
        if not 0 < self.v_min < self.v_max:
            raise InputError("require 0 < v_min < v_max")
        known = set(ids)
        for ln in self.lines:
            if ln.from_bus not in known or ln.to_bus not in known:
                raise InputError(f"line {ln.from_bus}-{ln.to_bus} references an unknown bus")
            if ln.from_bus == ln.to_bus:
                raise InputError(f"line {ln.from_bus}-{ln.to_bus} is a self loop")
            if ln.closed and ln.series_admittance == 0:
                raise InputError(f"closed line {ln.from_bus}-{ln.to_bus} has zero series admittance")

    @property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.kind == "slack")

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    @property
    def retained_ids(self) -> tuple[str, ...]:
        """Non-slack buses that carry injections, in file order."""
        return tuple(b.id for b in self.buses if b.kind in ("load", "pv"))

    @property
    def zero_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses if b.kind == "zero-injection")

    @property
    def load_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses if b.kind == "load")


@dataclass(frozen=True)
class FullAdmittance:
    matrix: np.ndarray
    ids: tuple[str, ...]

    @property
    def index(self) -> dict[str, int]:
        return {b: i for i, b in enumerate(self.ids)}


@dataclass(frozen=True)
class KronReduction:
    """Zero-injection buses eliminated from the full nodal matrix.

    ``y_kron`` is the Schur complement over every bus that is not
    zero-injection, slack first. ``y_reduced`` and ``b`` drop the slack row
    and column: ``y_reduced`` is the matrix the power flow runs on and
    ``b`` is the slack coupling column scaled by the slack voltage. ``phi``
    maps ``[v_slack, v_retained]`` to the eliminated voltages.
    """

    y_kron: np.ndarray
    phi: np.ndarray
    slack_id: str
    retained_ids: tuple[str, ...]
    zero_ids: tuple[str, ...]
    slack_voltage: complex
    kappa_kron: float
    v_min: float = 0.95
    v_max: float = 1.05
    y_reduced: np.ndarray = field(init=False)
    b: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "y_reduced", self.y_kron[1:, 1:].copy())
        object.__setattr__(self, "b", self.y_kron[1:, 0] * self.slack_voltage)

    @property
    def n(self) -> int:
        return len(self.retained_ids)

    def with_y(self, y_reduced: np.ndarray) -> "ReducedNetwork":
        return ReducedNetwork(
            np.asarray(y_reduced, dtype=complex), self.b.copy(), self.v_min, self.v_max
        )

    @property
    def network(self) -> "ReducedNetwork":
        return ReducedNetwork(self.y_reduced, self.b, self.v_min, self.v_max)


@dataclass(frozen=True)
class ReducedNetwork:
    """The pair (Y, b) the power-flow map depends on, plus the voltage band."""

    y: np.ndarray
    b: np.ndarray
    v_min: float = 0.95
    v_max: float = 1.05

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y, dtype=complex))
        b = np.atleast_1d(np.asarray(self.b, dtype=complex))
        if y.shape != (b.size, b.size):
            raise InputError(f"Y shape {y.shape} does not match b length {b.size}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.b.size

    @property
    def y_reduced(self) -> np.ndarray:
        return self.y

    def with_y(self, y: np.ndarray) -> "ReducedNetwork":
        return ReducedNetwork(np.asarray(y, dtype=complex), self.b.copy(), self.v_min, self.v_max)

    @property
    def network(self) -> "ReducedNetwork":
        return self


@dataclass(frozen=True)
class NetworkStats:
    d_max: int
    sigma_min_y: float
    flat_mismatch: float
    row_sum_norm: float


def _components(n: int, edges: list[tuple[int, int]]) -> np.ndarray:
    if edges:
        i, j = np.array(edges).T
        adj = coo_matrix((np.ones(len(edges)), (i, j)), shape=(n, n))
    else:
        adj = coo_matrix((n, n))
    _, labels = connected_components(adj, directed=False)
    return labels


def build_admittance(network: NetworkModel) -> FullAdmittance:
    ids = tuple(b.id for b in network.buses)
    index = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    y = np.zeros((n, n), dtype=complex)
    seen = set()
    edges = []
    for ln in network.lines:
        if not ln.closed:
            continue
        key = frozenset((ln.from_bus, ln.to_bus))
        if key in seen:
            raise InputError(f"duplicate line between {ln.from_bus} and {ln.to_bus}")
        seen.add(key)
        i, j = index[ln.from_bus], index[ln.to_bus]
        ys = complex(ln.series_admittance)
        ysh = complex(ln.shunt_admittance) / 2
        y[i, i] += ys + ysh
        y[j, j] += ys + ysh
        y[i, j] -= ys
        y[j, i] -= ys
        edges.append((i, j))
    labels = _components(n, edges)
    if labels.max(initial=0) > 0:
        groups = [[ids[k] for k in np.flatnonzero(labels == c)] for c in range(labels.max() + 1)]
        raise DisconnectedNetworkError(groups)
    return FullAdmittance(y, ids)


def _partition(y_full: FullAdmittance, network: NetworkModel):
    idx = y_full.index
    slack = network.slack.id
    keep = [idx[slack]] + [idx[b] for b in network.retained_ids]
    zero = [idx[b] for b in network.zero_ids]
    return keep, zero


def _zero_block_inverse(y_full: FullAdmittance, network: NetworkModel, zero: list[int]):
    yzz = y_full.matrix[np.ix_(zero, zero)]
    if not zero:
        return yzz
    s = np.linalg.svd(yzz, compute_uv=False)
    if s[-1] <= 1e-13 * max(s[0], 1e-300):
        _raise_singular_island(y_full, zero)
    return np.linalg.inv(yzz)


def _raise_singular_island(y_full: FullAdmittance, zero: list[int]):
    yzz = y_full.matrix[np.ix_(zero, zero)]
    edges = [
        (a, b)
        for a in range(len(zero))
        for b in range(a + 1, len(zero))
        if yzz[a, b] != 0
    ]
    labels = _components(len(zero), edges)
    for c in range(labels.max() + 1):
        members = np.flatnonzero(labels == c)
        block = yzz[np.ix_(members, members)]
        s = np.linalg.svd(block, compute_uv=False)
        if s[-1] <= 1e-13 * max(s[0], 1e-300):
            raise SingularZeroBlockError([y_full.ids[zero[m]] for m in members])
    raise SingularZeroBlockError([y_full.ids[z] for z in zero])


def kappa_kron(y_full: FullAdmittance, network: NetworkModel) -> float:
    keep, zero = _partition(y_full, network)
    if not zero:
        return 1.0
    yzz_inv = _zero_block_inverse(y_full, network, zero)
    a = np.linalg.norm(y_full.matrix[np.ix_(keep, zero)], 2)
    c = np.linalg.norm(yzz_inv, 2)
    return float(1.0 + 2.0 * a * c + (a * c) ** 2)


def kron_reduce(y_full: FullAdmittance, network: NetworkModel) -> KronReduction:
    keep, zero = _partition(y_full, network)
    y = y_full.matrix
    y_kk = y[np.ix_(keep, keep)]
    if zero:
        yzz_inv = _zero_block_inverse(y_full, network, zero)
        y_kz = y[np.ix_(keep, zero)]
        y_zk = y[np.ix_(zero, keep)]
        phi = -yzz_inv @ y_zk
        y_kron = y_kk + y_kz @ phi
    else:
        phi = np.zeros((0, len(keep)), dtype=complex)
        y_kron = y_kk.copy()
    return KronReduction(
        y_kron=y_kron,
        phi=phi,
        slack_id=network.slack.id,
        retained_ids=network.retained_ids,
        zero_ids=network.zero_ids,
        slack_voltage=complex(network.slack_voltage),
        kappa_kron=kappa_kron(y_full, network),
        v_min=network.v_min,
        v_max=network.v_max,
    )


def reduce_network(network: NetworkModel) -> KronReduction:
    return kron_reduce(build_admittance(network), network)


def recover_zero_voltages(red: KronReduction, v_r, v_slack: complex | None = None) -> np.ndarray:
    """Voltages at eliminated buses from retained-bus voltages.

    ``v_r`` may hold the ``n`` non-slack retained voltages (the slack voltage
    is then taken from the reduction, or ``v_slack``) or ``n + 1`` values
    with the slack first. Leading batch axes are allowed.
    """
    v_r = np.asarray(v_r, dtype=complex)
    m = red.phi.shape[1]
    if v_r.shape[-1] == m - 1:
        vs = red.slack_voltage if v_slack is None else complex(v_slack)
        pad = np.full(v_r.shape[:-1] + (1,), vs, dtype=complex)
        v_r = np.concatenate([pad, v_r], axis=-1)
    elif v_r.shape[-1] != m:
        raise InputError(f"expected {m - 1} or {m} retained voltages, got {v_r.shape[-1]}")
    return v_r @ red.phi.T


def structural_degree(y: np.ndarray) -> int:
    """Largest count of structurally nonzero entries in a row, diagonal included."""
    y = np.atleast_2d(y)
    if y.size == 0:
        return 0
    thresh = STRUCTURAL_ZERO_RTOL * np.linalg.norm(y)
    return int((np.abs(y) >= thresh).sum(axis=1).max()) if thresh > 0 else 0


def network_stats(red) -> NetworkStats:
    y = red.network.y
    b = red.network.b
    return NetworkStats(
        d_max=structural_degree(y),
        sigma_min_y=float(np.linalg.svd(y, compute_uv=False)[-1]),
        flat_mismatch=float(np.max(np.abs(y.sum(axis=1) + b))),
        row_sum_norm=float(np.max(np.abs(y).sum(axis=1))),
    )


# -- feeder file format ------------------------------------------------------

def _cx(d) -> complex:
    if isinstance(d, dict):
        return complex(float(d.get("re", 0.0)), float(d.get("im", 0.0)))
    if isinstance(d, (int, float)):
        return complex(d)
    raise InputError(f"complex value must be an object with re/im, got {d!r}")


def _cx_out(z: complex) -> dict:
    return {"re": float(z.real), "im": float(z.imag)}


def feeder_from_dict(doc: dict) -> NetworkModel:
    try:
        buses = []
        for b in doc["buses"]:
            vv = b.get("voltvar")
            buses.append(
                Bus(
                    id=str(b["id"]),
                    kind=b["kind"],
                    class_id=None if b.get("class_id") is None else int(b["class_id"]),
                    gamma=float(b.get("gamma", 0.0)),
                    power_factor_deg=float(b.get("power_factor_deg", 0.0)),
                    voltvar=None if vv is None else VoltVarCurve(tuple(map(tuple, vv))),
                )
            )
        lines = [
            Line(
                from_bus=str(ln["from"]),
                to_bus=str(ln["to"]),
                series_admittance=_cx(ln["series_admittance"]),
                shunt_admittance=_cx(ln.get("shunt_admittance", {"re": 0, "im": 0})),
                closed=bool(ln.get("closed", True)),
            )
            for ln in doc["lines"]
        ]
        return NetworkModel(
            buses=tuple(buses),
            lines=tuple(lines),
            slack_voltage=_cx(doc.get("slack_voltage", {"re": 1.0, "im": 0.0})),
            v_min=float(doc.get("v_min", 0.95)),
            v_max=float(doc.get("v_max", 1.05)),
        )
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed feeder description: {exc!r}") from exc


def feeder_to_dict(network: NetworkModel) -> dict:
    buses = []
    for b in network.buses:
        rec = {"id": b.id, "kind": b.kind}
        if b.class_id is not None:
            rec["class_id"] = b.class_id
        if b.kind == "load":
            rec["power_factor_deg"] = b.power_factor_deg
        if b.kind == "pv":
            rec["gamma"] = b.gamma
            if b.voltvar is not None:
                rec["voltvar"] = b.voltvar.to_list()
        buses.append(rec)
    lines = [
        {
            "from": ln.from_bus,
            "to": ln.to_bus,
            "series_admittance": _cx_out(ln.series_admittance),
            "shunt_admittance": _cx_out(ln.shunt_admittance),
            "closed": ln.closed,
        }
        for ln in network.lines
    ]
    return {
        "buses": buses,
        "lines": lines,
        "slack_voltage": _cx_out(network.slack_voltage),
        "v_min": network.v_min,
        "v_max": network.v_max,
    }


def load_feeder(path) -> NetworkModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read feeder {path}: {exc}") from exc
    return feeder_from_dict(doc)


def save_feeder(network: NetworkModel, path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(network), indent=2) + "\n")
