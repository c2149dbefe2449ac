import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from graphnorm.autodiff import Segments, ShapeError, constant
from graphnorm.graphs import Graph, batch_concat, build_topology
from graphnorm.norms import (EPS, GnParams, Norm, NormScope, RunningStats,
                             adjacency_wise_normalize, batch_wise_normalize, constrain_lambda,
                             edge_normalize, graph_wise_normalize, node_wise_normalize,
                             parse_norm, unified_gn_forward)


def _batch(*graphs):
    return batch_concat([Graph(build_topology(n, e), np.asarray(f, dtype=float).reshape(n, -1))
                         for n, e, f in graphs])


def _lambda(params):
    lam = constrain_lambda(params)
    return np.array([lam[u].values[0] for u in "nagb"]).T


class TestNodeWise:
    def test_hand_value(self):
        out, stats = node_wise_normalize(constant([[1.0, 3.0]]))
        np.testing.assert_allclose(out.values, [[-1 / (1 + EPS), 1 / (1 + EPS)]], rtol=0, atol=1e-15)
        assert stats.mean[0, 0] == 2.0 and stats.std[0, 0] == 1.0 + EPS

    def test_constant_row(self):
        out, _ = node_wise_normalize(constant([[5.0, 5.0, 5.0]]))
        np.testing.assert_array_equal(out.values, [[0.0, 0.0, 0.0]])

    def test_layer_norm_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(size=(int(rng.integers(1, 50)), int(rng.integers(1, 16)))) * 3 + 1
            out, _ = node_wise_normalize(constant(x))
            np.testing.assert_allclose(out.values, oracles.layer_norm(x), rtol=0, atol=1e-12)


class TestAdjacencyWise:
    def test_path(self):
        b = _batch((3, [(0, 1), (1, 2)], [0.0, 1.0, 2.0]))
        out, stats = adjacency_wise_normalize(b.H, b.topology)
        assert stats.mean[0, 0] == 0.5 and stats.std[0, 0] == 0.5 + EPS
        assert stats.mean[1, 0] == 1.0
        np.testing.assert_allclose(out.values[:2, 0], [-0.5 / (0.5 + EPS), 0.0], rtol=0, atol=1e-15)

    def test_isolated_node_matches_node_wise(self):
        b = _batch((2, [], [[1.0, 3.0], [0.0, 7.0]]))
        adj, _ = adjacency_wise_normalize(b.H, b.topology)
        node, _ = node_wise_normalize(b.H)
        np.testing.assert_array_equal(adj.values, node.values)

    def test_complete_graph_identical_rows(self):
        n = 4
        edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
        b = _batch((n, edges, np.tile([2.0, 2.0, 2.0], (n, 1))))
        out, _ = adjacency_wise_normalize(b.H, b.topology)
        np.testing.assert_array_equal(out.values, np.zeros((n, 3)))

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        for n, pairs in oracles.random_graphs(rng, 25):
            h = rng.normal(size=(n, int(rng.integers(1, 5))))
            b = _batch((n, pairs, h))
            _, stats = adjacency_wise_normalize(b.H, b.topology)
            expected = oracles.adjacency_stats(h, pairs)
            np.testing.assert_array_equal(stats.mean[:, 0], [m for m, _ in expected])
            np.testing.assert_array_equal(stats.std[:, 0], [s for _, s in expected])


class TestGraphWise:
    def test_hand_value(self):
        b = _batch((2, [], [0.0, 2.0]))
        out, _ = graph_wise_normalize(b.H, b.segment)
        np.testing.assert_allclose(out.values[:, 0], [-1 / (1 + EPS), 1 / (1 + EPS)], atol=1e-15)

    def test_two_graphs_independent(self):
        b = _batch((2, [], [0.0, 2.0]), (2, [], [10.0, 12.0]))
        out, stats = graph_wise_normalize(b.H, b.segment)
        np.testing.assert_array_equal(out.values[:2], out.values[2:])
        np.testing.assert_array_equal(stats.mean[:, 0], [1.0, 11.0])

    def test_single_node_graph(self):
        b = _batch((1, [], [[4.0, -2.0]]), (2, [], [0.0, 1.0, 2.0, 3.0]))
        out, _ = graph_wise_normalize(b.H, b.segment)
        np.testing.assert_array_equal(out.values[0], [0.0, 0.0])


class TestBatchWise:
    def test_single_graph_equals_graph_wise(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            h = rng.normal(size=(int(rng.integers(1, 30)), 3)) * 2 - 1
            b = _batch((len(h), [], h))
            bw, _ = batch_wise_normalize(b.H, training=True)
            gw, _ = graph_wise_normalize(b.H, b.segment)
            np.testing.assert_array_equal(bw.values, gw.values)

    def test_running_update(self):
        rs = RunningStats.init(1)
        rs.update(np.array([[1.0]]), np.array([[1.0]]))
        np.testing.assert_allclose(rs.running_mean, [[0.1]], rtol=0, atol=1e-16)
        assert rs.update_count == 1

    def test_training_folds_statistics(self):
        rs = RunningStats.init(2)
        batch_wise_normalize(constant([[0.0, 1.0], [2.0, 5.0]]), True, rs)
        np.testing.assert_allclose(rs.running_mean, [[0.1, 0.3]], rtol=1e-15)
        np.testing.assert_allclose(rs.running_var, [[0.9 + 0.1 * 1.0, 0.9 + 0.1 * 4.0]], rtol=1e-15)

    def test_inference_identity_statistics(self):
        h = np.array([[1.0, -2.0], [3.0, 0.5]])
        out, _ = batch_wise_normalize(constant(h), False, RunningStats.init(2))
        np.testing.assert_array_equal(out.values, h / (1.0 + EPS))

    def test_inference_needs_running(self):
        with pytest.raises(ValueError):
            batch_wise_normalize(constant([[1.0]]), training=False)

    def test_momentum_range(self):
        with pytest.raises(ValueError):
            RunningStats.init(2, momentum=1.0)


class TestEdgeVariants:
    def test_single_edge_node_variant(self):
        b = _batch((2, [(0, 1)], [[0.0], [0.0]]))
        scope = NormScope.for_edges(b)
        E = constant([[1.0, 3.0], [1.0, 3.0]])
        out = edge_normalize(E, "node", scope)
        np.testing.assert_allclose(out.values[0], [-1 / (1 + EPS), 1 / (1 + EPS)], atol=1e-15)

    def test_constant_edges_graph_variant(self):
        b = _batch((3, [(0, 1), (1, 2)], np.zeros(3)))
        E = constant(np.full((b.num_edges, 2), 4.0))
        out = edge_normalize(E, "graph", NormScope.for_edges(b))
        np.testing.assert_array_equal(out.values, np.zeros((b.num_edges, 2)))

    def test_triangle_adjacency_brute_force(self):
        b = _batch((3, [(0, 1), (1, 2), (0, 2)], np.zeros(3)))
        rng = np.random.default_rng(3)
        e = rng.normal(size=(b.num_edges, 2))
        scope = NormScope.for_edges(b)
        out = edge_normalize(constant(e), "adjacency", scope)
        pairs = oracles.line_pairs(b.edge_endpoints)
        stats = oracles.adjacency_stats(e, pairs)
        expected = np.array([(e[i] - m) / s for i, (m, s) in enumerate(stats)])
        np.testing.assert_array_equal(out.values, expected)


class TestConstrainLambda:
    def _params(self, raw, active="nagb"):
        p = GnParams(len(raw[0]), tuple(active))
        for u, col in zip("nagb", raw):
            p.raw[u].values = np.asarray(col, dtype=float).reshape(1, -1)
        return p

    def test_clip_and_normalize(self):
        lam = _lambda(self._params([[2.0], [-1.0], [1.0], [1.0]]))
        np.testing.assert_array_equal(lam, [[0.5, 0.0, 0.25, 0.25]])

    def test_equal_raw(self):
        np.testing.assert_array_equal(_lambda(GnParams(3)), np.full((3, 4), 0.25))

    def test_restricted(self):
        lam = _lambda(self._params([[9.0], [9.0], [1.0], [3.0]], active="gb"))
        np.testing.assert_array_equal(lam, [[0.0, 0.0, 0.25, 0.75]])

    def test_all_clipped_falls_back_to_uniform(self):
        lam = _lambda(self._params([[-1.0, 1.0], [-2.0, 0.0], [0.0, 0.0], [-3.0, 0.0]]))
        np.testing.assert_array_equal(lam, [[0.25, 0.25, 0.25, 0.25], [1.0, 0.0, 0.0, 0.0]])

    def test_unknown_or_empty_active(self):
        with pytest.raises(ValueError):
            GnParams(2, ())


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-3, 3)), st.sets(st.sampled_from("nagb"),
                                                                      min_size=1))
def test_lambda_on_simplex(raw, active):
    p = GnParams(6, tuple(active))
    for u, row in zip("nagb", raw):
        p.raw[u].values = row.reshape(1, -1)
    lam = _lambda(p)
    assert np.all(lam >= 0) and np.all(lam <= 1)
    np.testing.assert_allclose(lam.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    for k, u in enumerate("nagb"):
        if u not in active:
            assert np.all(lam[:, k] == 0.0)


class TestUnifiedGn:
    def _setup(self, seed=0, graphs=1):
        rng = np.random.default_rng(seed)
        parts = []
        for _ in range(graphs):
            n = int(rng.integers(3, 8))
            pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5]
            parts.append((n, pairs, rng.normal(size=(n, 3))))
        b = _batch(*parts)
        return b, NormScope.for_nodes(b)

    def test_one_hot_is_single_normalizer(self):
        b, scope = self._setup(graphs=2)
        refs = {"n": node_wise_normalize(b.H)[0], "a": adjacency_wise_normalize(b.H, b.topology)[0],
                "g": graph_wise_normalize(b.H, b.segment)[0],
                "b": batch_wise_normalize(b.H, True)[0]}
        for u in "nagb":
            p = GnParams(3)
            for v in "nagb":
                p.raw[v].values = np.full((1, 3), 1.0 if v == u else 0.0)
            out = unified_gn_forward(b.H, scope, p, training=True)
            np.testing.assert_array_equal(out.values, refs[u].values)

    def test_uniform_on_single_graph(self):
        b, scope = self._setup(seed=1)
        gamma = np.array([[1.5, -0.5, 2.0]])
        beta = np.array([[0.1, 0.2, -0.3]])
        p = GnParams(3)
        p.gamma.values, p.beta.values = gamma, beta
        out = unified_gn_forward(b.H, scope, p, training=True)
        n = node_wise_normalize(b.H)[0].values
        a = adjacency_wise_normalize(b.H, b.topology)[0].values
        g = graph_wise_normalize(b.H, b.segment)[0].values
        np.testing.assert_allclose(out.values, gamma * (0.25 * n + 0.25 * a + 0.5 * g) + beta,
                                   rtol=0, atol=1e-12)

    def test_zero_gamma(self):
        b, scope = self._setup(seed=2)
        p = GnParams(3)
        p.gamma.values = np.zeros((1, 3))
        p.beta.values = np.array([[1.0, 2.0, 3.0]])
        out = unified_gn_forward(b.H, scope, p)
        np.testing.assert_array_equal(out.values, np.tile([1.0, 2.0, 3.0], (b.num_nodes, 1)))

    def test_norm_slot_none(self):
        b, scope = self._setup()
        assert Norm.from_spec("none", 3)(b.H, scope) is b.H


class TestParseNorm:
    @pytest.mark.parametrize("spec,expected", [
        ("none", ("none", ())),
        ("g", ("single", ("g",))),
        ("gn", ("gn", ("n", "a", "g", "b"))),
        ("gn:b,g", ("gn", ("g", "b"))),
    ])
    def test_valid(self, spec, expected):
        assert parse_norm(spec) == expected

    @pytest.mark.parametrize("spec", ["x", "gn:", "gn:g,g", "gn:q"])
    def test_invalid(self, spec):
        with pytest.raises(ValueError):
            parse_norm(spec)


def test_segments_cover_rows():
    with pytest.raises(ShapeError):
        graph_wise_normalize(constant(np.ones((3, 1))), Segments([0, 0]))
