import sys

import numpy as np
import pytest

from dpphasor.grid import Bus, Line, NetworkModel, ReducedNetwork, reduce_network
from dpphasor.reference import reference_feeder, three_bus_feeder


def one_bus(y: float = 10.0) -> ReducedNetwork:
    """Single retained bus tied to a unit slack through admittance ``y``."""
    return ReducedNetwork(np.array([[y]], dtype=complex), np.array([-y], dtype=complex))


def random_radial(rng, n_buses: int, zero_frac: float = 0.4, pv: bool = False) -> NetworkModel:
    """Random tree feeder; leaves are never zero-injection buses."""
    parents = [None] + [int(rng.integers(0, k)) for k in range(1, n_buses)]
    children = {k: 0 for k in range(n_buses)}
    for k, p in enumerate(parents):
        if p is not None:
            children[p] += 1
    buses = [Bus("0", "slack")]
    for k in range(1, n_buses):
        if children[k] and rng.random() < zero_frac:
            buses.append(Bus(str(k), "zero-injection"))
        elif pv and rng.random() < 0.2:
            buses.append(Bus(str(k), "pv", gamma=0.05))
        else:
            buses.append(Bus(str(k), "load", power_factor_deg=float(rng.uniform(0, 30))))
    lines = []
    for k in range(1, n_buses):
        z = complex(rng.uniform(0.002, 0.02), rng.uniform(0.002, 0.03))
        lines.append(Line(str(parents[k]), str(k), 1 / z))
    return NetworkModel(tuple(buses), tuple(lines))


@pytest.fixture(scope="session")
def three_bus():
    return three_bus_feeder()


@pytest.fixture(scope="session")
def ref_net():
    return reference_feeder()


@pytest.fixture(scope="session")
def ref_red(ref_net):
    return reduce_network(ref_net)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
