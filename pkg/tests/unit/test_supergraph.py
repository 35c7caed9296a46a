import numpy as np
import pytest

from common.errors import ShapeMismatchError
from dbgc.polsar_data import FeatureImage
from dbgc.superpixel import SuperpixelSegmentation
from dbgc.supergraph import (
    SuperpixelGraph,
    build_graph,
    export_graph_json,
    graph_components,
    load_graph_json,
    node_to_pixel_lookup,
)


def segmentation(labels):
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    return SuperpixelSegmentation(labels=labels, k=k, k_target=k)


def brute_force_edges(labels):
    edges = set()
    height, width = labels.shape
    for r in range(height):
        for c in range(width):
            for rr, cc in ((r + 1, c), (r, c + 1)):
                if rr < height and cc < width and labels[r, c] != labels[rr, cc]:
                    a, b = sorted((int(labels[r, c]), int(labels[rr, cc])))
                    edges.add((a, b))
    return edges


@pytest.fixture
def random_features():
    return FeatureImage(np.random.default_rng(0).normal(size=(6, 8, 9)))


def test_side_by_side_segments_share_one_edge(random_features):
    labels = np.zeros((6, 8), dtype=np.int64)
    labels[:, 4:] = 1
    graph = build_graph(random_features, segmentation(labels))
    assert graph.n_nodes == 2
    assert graph.edges.tolist() == [[0, 1]]


def test_single_segment_has_no_edges(random_features):
    graph = build_graph(random_features, segmentation(np.zeros((6, 8), dtype=np.int64)))
    assert graph.n_edges == 0
    assert graph.edge_index(self_loops=True).tolist() == [[0], [0]]


def test_node_feature_is_member_mean():
    data = np.zeros((1, 3, 9))
    data[0, 0] = 1.0
    data[0, 1] = 3.0
    data[0, 2] = 7.0
    graph = build_graph(FeatureImage(data), segmentation([[0, 0, 1]]))
    np.testing.assert_allclose(graph.node_features[0], 2.0)
    np.testing.assert_allclose(graph.node_features[1], 7.0)


def test_identical_neighbours_have_unit_weight():
    data = np.zeros((1, 3, 9))
    data[0, 2] = 5.0
    graph = build_graph(FeatureImage(data), segmentation([[0, 1, 2]]))
    weights = dict(zip(map(tuple, graph.edges.tolist()), graph.edge_weights))
    assert weights[(0, 1)] == 1.0
    assert 0.0 < weights[(1, 2)] < 1.0


def test_edges_match_brute_force(random_features):
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 7, size=(6, 8))
    labels[0, :7] = np.arange(7)
    graph = build_graph(random_features, segmentation(labels))
    assert set(map(tuple, graph.edges.tolist())) == brute_force_edges(labels)
    assert np.all((graph.edge_weights > 0) & (graph.edge_weights <= 1))


def test_constant_features_give_constant_nodes_and_unit_weights():
    features = FeatureImage(np.full((4, 4, 9), 0.25))
    labels = np.repeat(np.arange(4), 4).reshape(4, 4)
    graph = build_graph(features, segmentation(labels))
    np.testing.assert_array_equal(graph.node_features, 0.25)
    np.testing.assert_array_equal(graph.edge_weights, 1.0)


def test_relabel_equivariance(random_features):
    labels = np.repeat(np.arange(4), 12).reshape(6, 8)
    permutation = np.array([2, 0, 3, 1])
    original = build_graph(random_features, segmentation(labels))
    permuted = build_graph(random_features, segmentation(permutation[labels]))

    np.testing.assert_allclose(permuted.node_features[permutation], original.node_features)
    mapped = {tuple(sorted(permutation[e])) for e in original.edges}
    assert set(map(tuple, permuted.edges.tolist())) == mapped


def test_dimension_mismatch(random_features):
    with pytest.raises(ShapeMismatchError):
        build_graph(random_features, segmentation(np.zeros((5, 8), dtype=np.int64)))


def test_invalid_edges_rejected():
    with pytest.raises(ShapeMismatchError):
        SuperpixelGraph(n_nodes=2, edges=[[1, 0]], edge_weights=[1.0], node_features=np.zeros((2, 9)))
    with pytest.raises(ShapeMismatchError):
        SuperpixelGraph(n_nodes=2, edges=[[0, 1]], edge_weights=[0.0], node_features=np.zeros((2, 9)))


def test_edge_index_is_symmetric_with_self_loops():
    graph = SuperpixelGraph(
        n_nodes=3, edges=[[0, 1], [1, 2]], edge_weights=[1.0, 0.5], node_features=np.zeros((3, 9))
    )
    pairs = set(map(tuple, graph.edge_index().T.tolist()))
    assert pairs == {(0, 1), (1, 0), (1, 2), (2, 1), (0, 0), (1, 1), (2, 2)}


def test_node_to_pixel_lookup_partitions_pixels():
    labels = np.array([[0, 0, 1], [2, 1, 1]])
    lookup = node_to_pixel_lookup(segmentation(labels))
    assert [len(coords) for coords in lookup] == [2, 3, 1]
    everything = {tuple(p) for coords in lookup for p in coords.tolist()}
    assert len(everything) == labels.size
    for k, coords in enumerate(lookup):
        assert np.all(labels[coords[:, 0], coords[:, 1]] == k)


def test_node_to_pixel_lookup_single_segment():
    lookup = node_to_pixel_lookup(segmentation(np.zeros((3, 2), dtype=np.int64)))
    assert len(lookup) == 1 and len(lookup[0]) == 6


def test_graph_of_a_scene_is_connected(small_graph):
    n_components, _ = graph_components(small_graph)
    assert n_components == 1


def test_graph_json_round_trip(tmp_path, small_graph, small_segmentation):
    path = export_graph_json(small_graph, tmp_path / "graph.json")
    loaded = load_graph_json(path, small_segmentation)
    np.testing.assert_array_equal(loaded.edges, small_graph.edges)
    np.testing.assert_array_equal(loaded.edge_weights, small_graph.edge_weights)
    np.testing.assert_array_equal(loaded.node_features, small_graph.node_features)
