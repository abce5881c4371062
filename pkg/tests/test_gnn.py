"""Adjacency normalization, heterogeneous convolutions, checkpoint format."""

import numpy as np
import pytest

from talentgraph import autodiff as ad
from talentgraph.autodiff import Tensor
from talentgraph.errors import FormatError, ValidationError
from talentgraph.gnn import (
    HeteroGNN,
    ModelSpec,
    build_relation_adjacencies,
    hetero_forward,
    init_layer,
    load_named_tensors,
    normalize_adjacency,
    save_named_tensors,
)
from talentgraph.graph import HeteroGraph
from talentgraph.profiles import EntityCategory

SOFT = EntityCategory.SOFT_SKILLS
HARD = EntityCategory.HARD_SKILLS


def dense_gcn_operator(edges, n):
    """Oracle: dense D^(-1/2) (A_w + I) D^(-1/2)."""
    adj = np.zeros((n, n))
    for i, j, w in edges:
        adj[i, j] += w
        adj[j, i] += w
    adj += np.eye(n)
    degree = adj.sum(axis=1)
    scale = np.diag(1.0 / np.sqrt(degree))
    return scale @ adj @ scale


def dense_rgcn_operator(edges, n):
    """Oracle: dense row-normalized unweighted adjacency, no self loops."""
    adj = np.zeros((n, n))
    for i, j, _ in edges:
        adj[i, j] = 1.0
        adj[j, i] = 1.0
    degree = adj.sum(axis=1)
    degree[degree == 0] = 1.0
    return adj / degree[:, None]


class TestNormalizeAdjacency:
    def test_isolated_node_gcn_self_loop(self):
        rel = normalize_adjacency([], num_nodes=1, mode="gcn")
        dense = rel.matrix.toarray()
        assert dense.shape == (1, 1)
        assert dense[0, 0] == 1.0

    def test_two_nodes_unit_edge_gcn(self):
        # A_w + I = [[1,1],[1,1]], degrees [2,2] -> all coefficients 1/2
        rel = normalize_adjacency([(0, 1, 1.0)], num_nodes=2, mode="gcn")
        assert np.allclose(rel.matrix.toarray(), np.full((2, 2), 0.5))

    def test_rgcn_ignores_weights(self):
        rel = normalize_adjacency([(0, 1, 0.5)], num_nodes=2, mode="rgcn")
        assert np.allclose(rel.matrix.toarray(), np.array([[0.0, 1.0], [1.0, 0.0]]))

    def test_matches_dense_oracle_random(self):
        rng = np.random.default_rng(0)
        n = 9
        edges = [
            (i, j, float(rng.uniform(0.1, 1.0)))
            for i in range(n)
            for j in range(i + 1, n)
            if rng.random() < 0.4
        ]
        gcn = normalize_adjacency(edges, n, "gcn")
        assert np.allclose(gcn.matrix.toarray(), dense_gcn_operator(edges, n))
        rgcn = normalize_adjacency(edges, n, "rgcn")
        assert np.allclose(rgcn.matrix.toarray(), dense_rgcn_operator(edges, n))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError, match="negative"):
            normalize_adjacency([(0, 1, -0.5)], 2, "gcn")

    def test_self_loop_input_rejected(self):
        with pytest.raises(ValidationError, match="self-loop"):
            normalize_adjacency([(1, 1, 0.5)], 2, "gcn")


def random_graph(n, seed, categories=(SOFT, HARD), weight_range=(0.1, 0.8)):
    rng = np.random.default_rng(seed)
    edges = {cat: [] for cat in EntityCategory}
    for cat in categories:
        for i in range(n):
            for j in range(i + 1, n):
                if rng.random() < 0.5:
                    edges[cat].append((i, j, float(rng.uniform(*weight_range))))
    nodes = tuple(f"c{i}" for i in range(n))
    features = rng.standard_normal((n, 5))
    return HeteroGraph(nodes, features, edges)


class TestHeteroForward:
    def test_single_relation_equals_plain_gcn(self):
        # One relation with the hetero layer == dense GCN layer computed by hand.
        graph = random_graph(8, seed=1, categories=(SOFT,))
        adj = build_relation_adjacencies(graph, "gcn")
        rng = np.random.default_rng(2)
        params = init_layer(rng, 5, 4, [SOFT], "gcn")
        h = Tensor(graph.features)
        out = hetero_forward(h, adj, params, "tanh")
        operator = dense_gcn_operator(graph.edges[SOFT], 8)
        expected = np.tanh(
            operator @ graph.features @ params.weights[SOFT].data + params.bias.data
        )
        assert np.allclose(out.data, expected, atol=1e-9)

    def test_zero_features_zero_bias(self):
        graph = random_graph(5, seed=3)
        adj = build_relation_adjacencies(graph, "gcn")
        rng = np.random.default_rng(4)
        params = init_layer(rng, 5, 4, [SOFT, HARD], "gcn")
        out = hetero_forward(Tensor(np.zeros((5, 5))), adj, params, "tanh")
        assert np.all(out.data == 0.0)

    def test_duplicated_relation_doubles_preactivation(self):
        graph = random_graph(6, seed=5, categories=(SOFT,))
        # Same edges under a second category; same weight matrix for both.
        graph.edges[HARD] = list(graph.edges[SOFT])
        adj = build_relation_adjacencies(graph, "gcn")
        rng = np.random.default_rng(6)
        params = init_layer(rng, 5, 3, [SOFT, HARD], "gcn")
        params.weights[HARD].data = params.weights[SOFT].data.copy()
        params.bias.data[:] = 0.0
        out = hetero_forward(Tensor(graph.features), adj, params, "tanh")
        single = (
            dense_gcn_operator(graph.edges[SOFT], 6)
            @ graph.features
            @ params.weights[SOFT].data
        )
        assert np.allclose(out.data, np.tanh(2.0 * single), atol=1e-9)

    def test_rgcn_weight_blindness_bitwise(self):
        graph = random_graph(7, seed=7)
        perturbed = HeteroGraph(
            graph.nodes,
            graph.features,
            {
                cat: [(i, j, w * 3.7 + 0.01) for i, j, w in edges]
                for cat, edges in graph.edges.items()
            },
        )
        spec = ModelSpec(conv="rgcn", hidden=6, depth=2, activation="elu")
        trunk_a = HeteroGNN(spec, 5, (SOFT, HARD), np.random.default_rng(8))
        trunk_b = HeteroGNN(spec, 5, (SOFT, HARD), np.random.default_rng(8))
        out_a = trunk_a.forward(Tensor(graph.features), build_relation_adjacencies(graph, "rgcn"))
        out_b = trunk_b.forward(
            Tensor(perturbed.features), build_relation_adjacencies(perturbed, "rgcn")
        )
        assert np.array_equal(out_a.data, out_b.data)

    def test_gcn_weight_sensitivity(self):
        # Non-vacuity: scaling one edge weight must change the affected rows.
        graph = random_graph(7, seed=9, categories=(SOFT,))
        i, j, w = graph.edges[SOFT][0]
        modified = HeteroGraph(
            graph.nodes,
            graph.features,
            {SOFT: [(i, j, w * 2.0)] + graph.edges[SOFT][1:], HARD: []},
        )
        spec = ModelSpec(conv="gcn", hidden=6, depth=1, activation="tanh")
        trunk_a = HeteroGNN(spec, 5, (SOFT,), np.random.default_rng(10))
        trunk_b = HeteroGNN(spec, 5, (SOFT,), np.random.default_rng(10))
        out_a = trunk_a.forward(Tensor(graph.features), build_relation_adjacencies(graph, "gcn"))
        out_b = trunk_b.forward(
            Tensor(modified.features), build_relation_adjacencies(modified, "gcn")
        )
        assert not np.allclose(out_a.data[i], out_b.data[i])

    def test_empty_relation_neutrality(self):
        graph = random_graph(6, seed=11, categories=(SOFT,))
        assert not graph.edges[HARD]
        spec = ModelSpec(conv="gcn", hidden=4, depth=2, activation="leaky_relu")
        trunk = HeteroGNN(spec, 5, tuple(EntityCategory), np.random.default_rng(12))
        adj_with = build_relation_adjacencies(graph, "gcn")
        out_a = trunk.forward(Tensor(graph.features), adj_with)
        # Removing the empty relation's adjacency entry changes nothing
        # (build_relation_adjacencies already omits it).
        assert HARD not in adj_with
        only_soft = {SOFT: adj_with[SOFT]}
        out_b = trunk.forward(Tensor(graph.features), only_soft)
        assert np.array_equal(out_a.data, out_b.data)

    def test_permutation_equivariance(self):
        graph = random_graph(9, seed=13)
        rng = np.random.default_rng(14)
        perm = rng.permutation(9)
        inverse = np.argsort(perm)
        permuted = HeteroGraph(
            tuple(graph.nodes[p] for p in perm),
            graph.features[perm],
            {
                cat: sorted(
                    tuple(sorted((int(inverse[i]), int(inverse[j])))) + (w,)
                    for i, j, w in edges
                )
                for cat, edges in graph.edges.items()
            },
        )
        spec = ModelSpec(conv="gcn", hidden=6, depth=3, activation="tanh")
        trunk_a = HeteroGNN(spec, 5, (SOFT, HARD), np.random.default_rng(15))
        trunk_b = HeteroGNN(spec, 5, (SOFT, HARD), np.random.default_rng(15))
        out = trunk_a.forward(Tensor(graph.features), build_relation_adjacencies(graph, "gcn"))
        out_perm = trunk_b.forward(
            Tensor(permuted.features), build_relation_adjacencies(permuted, "gcn")
        )
        assert np.allclose(out.data[perm], out_perm.data, atol=1e-9)

    def test_rgcn_self_weight_used(self):
        graph = random_graph(4, seed=16, categories=())
        spec = ModelSpec(conv="rgcn", hidden=3, depth=1, activation="tanh")
        trunk = HeteroGNN(spec, 5, (SOFT,), np.random.default_rng(17))
        out = trunk.forward(Tensor(graph.features), {})
        layer = trunk.layers[0]
        expected = np.tanh(graph.features @ layer.self_weight.data + layer.bias.data)
        assert np.allclose(out.data, expected)

    def test_nonfinite_input_rejected(self):
        graph = random_graph(3, seed=18)
        adj = build_relation_adjacencies(graph, "gcn")
        params = init_layer(np.random.default_rng(19), 5, 2, (SOFT, HARD), "gcn")
        bad = np.zeros((3, 5))
        bad[0, 0] = np.inf
        from talentgraph.errors import NumericError

        with pytest.raises(NumericError):
            hetero_forward(Tensor(bad), adj, params, "tanh")


class TestBackwardThroughLayers:
    def test_finite_difference_small_network(self):
        from .test_autodiff import finite_difference_check

        graph = random_graph(6, seed=20)
        adj = build_relation_adjacencies(graph, "gcn")
        spec = ModelSpec(conv="gcn", hidden=4, depth=2, activation="tanh")
        trunk = HeteroGNN(spec, 5, (SOFT, HARD), np.random.default_rng(21))
        features = Tensor(graph.features)

        def build_loss():
            return ad.tsum(ad.mul(trunk.forward(features, adj), 0.25))

        params = [tensor for _, tensor in trunk.parameters()]
        finite_difference_check(build_loss, params)

    def test_zero_upstream_zero_param_grads(self):
        graph = random_graph(5, seed=22)
        adj = build_relation_adjacencies(graph, "gcn")
        spec = ModelSpec(conv="gcn", hidden=3, depth=1, activation="tanh")
        trunk = HeteroGNN(spec, 5, (SOFT, HARD), np.random.default_rng(23))
        loss = ad.scale(ad.tsum(trunk.forward(Tensor(graph.features), adj)), 0.0)
        loss.backward()
        for _, tensor in trunk.parameters():
            assert np.all(tensor.grad == 0.0)


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(24)
        tensors = [("a.weight", rng.standard_normal((3, 4))), ("b.bias", rng.standard_normal((1, 4)))]
        header = {"kind": "test", "widths": [3, 4]}
        path = tmp_path / "model.gnn1"
        save_named_tensors(path, header, tensors)
        loaded_header, loaded = load_named_tensors(path)
        assert loaded_header == header
        for name, array in tensors:
            # f32 round trip: exact at float32 resolution
            assert np.allclose(loaded[name], array, atol=1e-6)
            assert loaded[name].shape == array.shape

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "model.gnn1"
        save_named_tensors(path, {}, [("w", np.ones((2, 2)))])
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(FormatError, match="truncated"):
            load_named_tensors(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.gnn1"
        save_named_tensors(path, {}, [])
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            load_named_tensors(path)

    def test_byte_identical_writes(self, tmp_path):
        tensors = [("w", np.full((2, 2), 0.5))]
        a, b = tmp_path / "a.gnn1", tmp_path / "b.gnn1"
        save_named_tensors(a, {"x": 1}, tensors)
        save_named_tensors(b, {"x": 1}, tensors)
        assert a.read_bytes() == b.read_bytes()
