import math

import numpy as np
import pytest

from graphnorm import autodiff as ad
from graphnorm.autodiff import Segments, constant
from graphnorm.graphs import Graph, batch_concat, build_topology
from graphnorm.layers import (MESSAGE_PASSING_FORMS, TaskHead, balanced_accuracy, gat_attention,
                              gat_heads, gat_layer, gatedgcn_gates, gatedgcn_layer, gcn_layer,
                              loss_and_metrics, message_passing_conformance, readout,
                              weighted_accuracy)


def _eye(d):
    return constant(np.eye(d))


class TestGcn:
    def test_mean_then_relu(self):
        # node 0 sees itself (2) and node 1 (4)
        topo = build_topology(2, [(0, 1)])
        out = gcn_layer(constant([[2.0], [4.0]]), topo, _eye(1), residual=False)
        np.testing.assert_array_equal(out.values, [[3.0], [3.0]])

    def test_zero_weights(self):
        topo = build_topology(3, [(0, 1), (1, 2)])
        H = constant(np.random.default_rng(0).normal(size=(3, 2)))
        out = gcn_layer(H, topo, constant(np.zeros((2, 2))), residual=False)
        np.testing.assert_array_equal(out.values, np.zeros((3, 2)))

    def test_relu_clamp(self):
        topo = build_topology(2, [(0, 1)])
        out = gcn_layer(constant([[-1.0], [-1.0]]), topo, _eye(1), residual=False)
        np.testing.assert_array_equal(out.values, [[0.0], [0.0]])

    def test_residual(self):
        topo = build_topology(2, [(0, 1)])
        out = gcn_layer(constant([[2.0], [4.0]]), topo, _eye(1))
        np.testing.assert_array_equal(out.values, [[5.0], [7.0]])


class TestGatAttention:
    def test_single_member_scope(self):
        topo = build_topology(1, [])
        coef = gat_attention(constant([[0.7]]), topo, _eye(1), constant([[1.0], [2.0]]))
        np.testing.assert_array_equal(coef.values, [[1.0]])

    def test_identical_neighbors(self):
        topo = build_topology(3, [(0, 1), (0, 2)])
        H = constant([[5.0], [1.0], [1.0]])
        coef = gat_attention(H, topo, _eye(1), constant([[1.0], [0.5]]))
        nb = topo.scope(True)
        row0 = coef.values[nb.segments.ids == 0, 0]
        # scope of node 0 is {0, 1, 2}; the last two share Wh
        assert row0[1] == row0[2]

    def test_softmax_arithmetic(self):
        # scores: self 0, neighbor ln 3 -> 1/4, 3/4
        topo = build_topology(2, [(0, 1)])
        H = constant([[0.0], [math.log(3.0)]])
        coef = gat_attention(H, topo, _eye(1), constant([[1.0], [0.0]]))
        np.testing.assert_allclose(coef.values[:2, 0], [0.25, 0.75], rtol=0, atol=1e-15)


class TestGatLayer:
    def test_self_only_fixed_point(self):
        topo = build_topology(1, [])
        H = constant([[0.3, -1.2]])
        out = gat_layer(H, topo, [(_eye(2), constant(np.ones((4, 1))))], residual=False,
                        activation="identity")
        np.testing.assert_allclose(out.values, H.values, rtol=0, atol=1e-15)

    def test_equal_coefficients_mean(self):
        topo = build_topology(2, [(0, 1)])
        out = gat_layer(constant([[0.0], [2.0]]), topo, [(_eye(1), constant(np.zeros((2, 1))))],
                        residual=False, activation="identity")
        np.testing.assert_array_equal(out.values, [[1.0], [1.0]])

    def test_two_identical_heads(self):
        rng = np.random.default_rng(0)
        topo = build_topology(4, [(0, 1), (1, 2), (2, 3)])
        H = constant(rng.normal(size=(4, 3)))
        head = (constant(rng.normal(size=(3, 3))), constant(rng.normal(size=(6, 1))))
        out = gat_heads(H, topo, [head, head]).values
        np.testing.assert_array_equal(out[:, :3], out[:, 3:])


class TestGatedGcn:
    def test_single_neighbor_gate(self):
        gate = gatedgcn_gates(constant([[0.0]]), Segments([0]), eps=1e-6)
        np.testing.assert_allclose(gate.values, [[0.5 / (0.5 + 1e-6)]], rtol=0, atol=1e-16)

    def test_zero_transform_keeps_edges(self):
        topo = build_topology(3, [(0, 1), (1, 2)])
        rng = np.random.default_rng(1)
        H = constant(rng.normal(size=(3, 2)))
        E = constant(rng.normal(size=(topo.num_entries, 2)))
        zero = constant(np.zeros((2, 2)))
        params = {"A": zero, "B": zero, "C": zero, "W": _eye(2), "U": _eye(2)}
        _, E_new = gatedgcn_layer(H, E, topo, params)
        np.testing.assert_array_equal(E_new.values, E.values)

    def test_equal_edges_equal_gates(self):
        E = constant(np.full((2, 3), 0.4))
        gates = gatedgcn_gates(E, Segments([0, 0]))
        np.testing.assert_array_equal(gates.values[0], gates.values[1])
        np.testing.assert_allclose(gates.values.sum(axis=0), 1.0, rtol=0, atol=1e-5)

    def test_shape_checks(self):
        topo = build_topology(2, [(0, 1)])
        params = {k: _eye(2) for k in "ABCWU"}
        with pytest.raises(ad.ShapeError):
            gatedgcn_layer(constant(np.ones((2, 2))), constant(np.ones((3, 2))), topo, params)


@pytest.mark.parametrize("kind", sorted(MESSAGE_PASSING_FORMS))
def test_message_passing_conformance(kind):
    for seed in range(3):
        assert message_passing_conformance(kind, seed=seed)


def test_conformance_unknown_kind():
    with pytest.raises(ValueError):
        message_passing_conformance("sage")


class TestHeads:
    def _batch(self, task):
        g1 = Graph(build_topology(2, [(0, 1)]), np.array([[1.0], [3.0]]))
        g2 = Graph(build_topology(3, [(0, 1), (1, 2)]), np.zeros((3, 1)))
        for g in (g1, g2):
            g.node_labels = np.zeros(g.num_nodes, dtype=int)
            g.graph_label = 0.0
            g.edge_labels = np.zeros(g.topology.undirected_edges().shape[0], dtype=int)
        return batch_concat([g1, g2])

    def test_graph_mean_pool(self):
        b = self._batch("graph-reg")
        head = TaskHead("graph-regress", _eye(1), constant([[0.0]]), _eye(1), constant([[0.0]]))
        out = readout("graph-regress", b.H, b, head)
        np.testing.assert_array_equal(out.values, [[2.0], [0.0]])

    def test_link_width(self):
        b = self._batch("link")
        head = TaskHead.create("link-predict", 1, 4, 1, np.random.default_rng(0))
        assert head.W1.rows == 2
        out = readout("link-predict", b.H, b, head)
        assert out.shape == (3, 1)

    def test_node_logits_shape(self):
        b = self._batch("node")
        head = TaskHead.create("node-classify", 1, 4, 3, np.random.default_rng(0))
        assert readout("node-classify", b.H, b, head).shape == (5, 3)

    def test_mismatched_kind(self):
        b = self._batch("node")
        head = TaskHead.create("node-classify", 1, 4, 3, np.random.default_rng(0))
        with pytest.raises(ValueError):
            readout("graph-classify", b.H, b, head)


class TestLossesAndMetrics:
    def test_perfect_classifier(self):
        logits = constant(np.array([[30.0, 0.0], [0.0, 30.0], [30.0, 0.0]]))
        loss, m = loss_and_metrics(logits, [0, 1, 0], "node-classify")
        assert m["weighted_accuracy"] == 1.0 and m["balanced_accuracy"] == 1.0
        assert loss.item() < 1e-12

    def test_balanced_accuracy(self):
        labels = [0, 0, 0, 1]
        pred = [0, 0, 0, 0]
        assert balanced_accuracy(pred, labels) == 0.5
        assert weighted_accuracy(pred, labels) == 0.75

    def test_mae(self):
        loss, m = loss_and_metrics(constant([[1.0], [3.0]]), [0.0, 0.0], "graph-regress")
        assert m["mae"] == 2.0 and loss.item() == 2.0

    def test_cross_entropy_value(self):
        loss, _ = loss_and_metrics(constant([[0.0, 0.0]]), [1], "graph-classify")
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-15)

    def test_bce_value(self):
        loss, m = loss_and_metrics(constant([[0.0], [2.0]]), [1, 0], "link-predict")
        expected = (math.log(2.0) + math.log1p(math.exp(2.0))) / 2
        assert loss.item() == pytest.approx(expected, abs=1e-15)
        assert m["f1"] == 0.0

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            loss_and_metrics(constant([[0.0, 0.0]]), [2], "node-classify")
