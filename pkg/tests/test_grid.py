import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpphasor.errors import DisconnectedNetworkError, InputError, SingularZeroBlockError
from dpphasor.grid import (
    Bus,
    Line,
    NetworkModel,
    ReducedNetwork,
    build_admittance,
    feeder_from_dict,
    feeder_to_dict,
    kappa_kron,
    kron_reduce,
    load_feeder,
    network_stats,
    recover_zero_voltages,
    reduce_network,
    save_feeder,
)
from dpphasor.reference import data_path

from conftest import random_radial


def two_bus(closed=True):
    return NetworkModel(
        (Bus("1", "slack"), Bus("2", "load")),
        (Line("1", "2", 1.0 + 0j, closed=closed),),
    )


class TestBuildAdmittance:
    def test_two_bus(self):
        y = build_admittance(two_bus()).matrix
        np.testing.assert_array_equal(y, [[1, -1], [-1, 1]])

    def test_open_line_disconnects(self):
        with pytest.raises(DisconnectedNetworkError):
            build_admittance(two_bus(closed=False))

    def test_three_bus_chain(self, three_bus):
        y = build_admittance(three_bus).matrix
        np.testing.assert_array_equal(y, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])

    def test_shunt_split_between_ends(self):
        net = NetworkModel(
            (Bus("1", "slack"), Bus("2", "load")),
            (Line("1", "2", 2.0 - 4.0j, shunt_admittance=0.2j),),
        )
        y = build_admittance(net).matrix
        np.testing.assert_allclose(np.diag(y), [2 - 3.9j, 2 - 3.9j])
        np.testing.assert_allclose(y[0, 1], -(2 - 4j))

    def test_duplicate_line_rejected(self):
        net = NetworkModel(
            (Bus("1", "slack"), Bus("2", "load")),
            (Line("1", "2", 1.0 + 0j), Line("2", "1", 3.0 + 0j)),
        )
        with pytest.raises(InputError, match="duplicate"):
            build_admittance(net)

    def test_open_duplicate_ignored(self):
        net = NetworkModel(
            (Bus("1", "slack"), Bus("2", "load")),
            (Line("1", "2", 1.0 + 0j), Line("2", "1", 3.0 + 0j, closed=False)),
        )
        np.testing.assert_array_equal(build_admittance(net).matrix, [[1, -1], [-1, 1]])

    def test_rows_sum_to_zero_without_shunts(self, ref_net):
        y = build_admittance(ref_net).matrix
        np.testing.assert_allclose(y.sum(axis=1), 0, atol=1e-9)
        np.testing.assert_array_equal(y, y.T)


class TestNetworkValidation:
    def test_two_slacks_rejected(self):
        with pytest.raises(InputError):
            NetworkModel((Bus("1", "slack"), Bus("2", "slack")), (Line("1", "2", 1.0),))

    def test_unknown_kind(self):
        with pytest.raises(InputError):
            Bus("x", "generator")

    def test_unknown_bus_in_line(self):
        with pytest.raises(InputError):
            NetworkModel((Bus("1", "slack"),), (Line("1", "9", 1.0),))

    def test_gamma_only_on_pv(self):
        with pytest.raises(InputError):
            Bus("x", "load", gamma=1.0)

    def test_power_factor_range(self):
        with pytest.raises(InputError):
            Bus("x", "load", power_factor_deg=90.0)


class TestKronReduce:
    def test_no_zero_buses(self):
        net = NetworkModel(
            (Bus("s", "slack"), Bus("a", "load"), Bus("b", "load")),
            (Line("s", "a", 2.0), Line("a", "b", 3.0)),
        )
        yf = build_admittance(net)
        red = kron_reduce(yf, net)
        np.testing.assert_array_equal(red.y_reduced, yf.matrix[1:, 1:])
        assert red.phi.shape[0] == 0
        assert red.kappa_kron == 1.0

    def test_three_bus(self, three_bus):
        red = reduce_network(three_bus)
        np.testing.assert_allclose(red.y_kron, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)
        np.testing.assert_allclose(red.phi, [[0.5, 0.5]], atol=1e-15)
        assert red.retained_ids == ("3",)

    def test_slack_coupling_column(self):
        net = NetworkModel((Bus("s", "slack"), Bus("a", "load")), (Line("s", "a", 10.0),))
        red = reduce_network(net)
        np.testing.assert_allclose(red.b, [-10.0])
        np.testing.assert_allclose(red.y_reduced, [[10.0]])

    def test_slack_voltage_scales_b(self):
        net = NetworkModel(
            (Bus("s", "slack"), Bus("a", "load")), (Line("s", "a", 10.0),), slack_voltage=1.02j
        )
        np.testing.assert_allclose(reduce_network(net).b, [-10.2j])

    def test_singular_zero_island_named(self):
        # two zero-injection buses tied only by a lossless purely-shunted loop
        net = NetworkModel(
            (Bus("s", "slack"), Bus("z1", "zero-injection"), Bus("z2", "zero-injection"), Bus("a", "load")),
            (Line("s", "z1", 1j), Line("z1", "z2", -0.5j), Line("z2", "a", 1j)),
        )
        with pytest.raises(SingularZeroBlockError, match="z1|z2"):
            reduce_network(net)

    @pytest.mark.parametrize("seed", range(5))
    def test_sequential_equals_block_elimination(self, seed):
        rng = np.random.default_rng(seed)
        net = random_radial(rng, 12, zero_frac=0.6)
        yf = build_admittance(net)
        red = kron_reduce(yf, net)
        y = yf.matrix.copy()
        keep = list(range(y.shape[0]))
        idx = yf.index
        for z in net.zero_ids:
            k = keep.index(idx[z])
            other = [i for i in range(len(keep)) if i != k]
            y = y[np.ix_(other, other)] - np.outer(y[other, k], y[k, other]) / y[k, k]
            keep.pop(k)
        np.testing.assert_allclose(y, red.y_kron, atol=1e-12 * np.abs(y).max())


class TestRecoverZeroVoltages:
    def test_empty_phi(self):
        net = NetworkModel((Bus("s", "slack"), Bus("a", "load")), (Line("s", "a", 1.0),))
        assert recover_zero_voltages(reduce_network(net), [1.0]).shape == (0,)

    def test_three_bus(self, three_bus):
        red = reduce_network(three_bus)
        np.testing.assert_allclose(recover_zero_voltages(red, [1.0, 1.0]), [1.0])
        np.testing.assert_allclose(recover_zero_voltages(red, [0.0, 0.0]), [0.0])
        np.testing.assert_allclose(recover_zero_voltages(red, [0.9], v_slack=1.0), [0.95])

    def test_dimension_mismatch(self, three_bus):
        with pytest.raises(InputError):
            recover_zero_voltages(reduce_network(three_bus), [1.0, 1.0, 1.0])


class TestKappa:
    def test_empty_zero_set(self):
        net = NetworkModel((Bus("s", "slack"), Bus("a", "load")), (Line("s", "a", 1.0),))
        assert kappa_kron(build_admittance(net), net) == 1.0

    def test_three_bus(self, three_bus):
        k = kappa_kron(build_admittance(three_bus), three_bus)
        assert k == pytest.approx(1 + math.sqrt(2) + 0.5, abs=1e-12)

    @given(st.floats(0.01, 100.0))
    @settings(max_examples=25, deadline=None)
    def test_scale_invariant(self, c):
        net = random_radial(np.random.default_rng(3), 10, zero_frac=0.6)
        scaled = NetworkModel(
            net.buses, tuple(Line(l.from_bus, l.to_bus, c * l.series_admittance) for l in net.lines)
        )
        k0 = kappa_kron(build_admittance(net), net)
        assert kappa_kron(build_admittance(scaled), scaled) == pytest.approx(k0, rel=1e-9)


class TestNetworkStats:
    def test_three_bus(self):
        s = network_stats(ReducedNetwork(np.array([[0.5, -0.5], [-0.5, 0.5]]), np.zeros(2)))
        # the row-support count includes the diagonal entry
        assert s.d_max == 2
        assert s.sigma_min_y == pytest.approx(0.0, abs=1e-15)

    def test_one_bus(self):
        s = network_stats(ReducedNetwork(np.array([[10.0]]), np.array([-10.0])))
        assert s.flat_mismatch == 0.0
        assert s.row_sum_norm == 10.0
        assert s.d_max == 1

    def test_identity(self):
        s = network_stats(ReducedNetwork(np.eye(3), np.zeros(3)))
        assert s.flat_mismatch == 1.0
        assert s.sigma_min_y == pytest.approx(1.0)

    def test_reference_feeder(self, ref_red):
        s = network_stats(ref_red)
        assert ref_red.n == 29
        assert s.sigma_min_y > 0
        assert s.flat_mismatch < 1e-9


class TestFeederFormat:
    def test_round_trip(self, ref_net, tmp_path):
        save_feeder(ref_net, tmp_path / "f.json")
        back = load_feeder(tmp_path / "f.json")
        assert back == ref_net

    def test_dict_round_trip_three_bus(self, three_bus):
        assert feeder_from_dict(feeder_to_dict(three_bus)) == three_bus

    def test_shipped_example(self, three_bus):
        net = load_feeder(data_path("three_bus.json"))
        red = reduce_network(net)
        np.testing.assert_allclose(red.y_kron, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"buses": []}')
        with pytest.raises(InputError):
            load_feeder(p)

    def test_disconnected_components_reported(self):
        doc = {
            "buses": [{"id": "s", "kind": "slack"}, {"id": "a", "kind": "load"}, {"id": "b", "kind": "load"}],
            "lines": [{"from": "s", "to": "a", "series_admittance": {"re": 1, "im": 0}}],
        }
        with pytest.raises(DisconnectedNetworkError, match="b"):
            build_admittance(feeder_from_dict(doc))
