import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from aws_lambda_powertools import Logger
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from common.errors import ShapeMismatchError
from dbgc.polsar_data import FeatureImage
from dbgc.superpixel import SuperpixelSegmentation, adjacent_label_pairs, segment_sizes

logger = Logger(service="dbgc", child=True)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SuperpixelGraph:
    """Undirected superpixel graph; `edges` holds unordered pairs as rows (i < j)."""

    n_nodes: int
    edges: np.ndarray
    edge_weights: np.ndarray
    node_features: np.ndarray
    seg_ref: Optional[SuperpixelSegmentation] = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.edge_weights, dtype=np.float64).reshape(-1)
        features = np.asarray(self.node_features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != self.n_nodes:
            raise ShapeMismatchError(
                f"node_features must have {self.n_nodes} rows, got {features.shape}"
            )
        if weights.shape[0] != edges.shape[0]:
            raise ShapeMismatchError("edge_weights must match the edge list")
        if edges.size and (
            np.any(edges[:, 0] >= edges[:, 1]) or edges.min() < 0 or edges.max() >= self.n_nodes
        ):
            raise ShapeMismatchError("edges must be (i, j) rows with 0 <= i < j < n_nodes")
        if weights.size and (np.any(weights <= 0.0) or np.any(weights > 1.0)):
            raise ShapeMismatchError("edge weights must lie in (0, 1]")
        if not np.all(np.isfinite(features)):
            raise ShapeMismatchError("node features must be finite")
        if self.seg_ref is not None and self.seg_ref.k != self.n_nodes:
            raise ShapeMismatchError("graph and segmentation disagree on the node count")
        for name, value in (("edges", edges), ("edge_weights", weights), ("node_features", features)):
            value = np.array(value, copy=True)
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def edge_index(self, self_loops: bool = True) -> np.ndarray:
        """(2, M) array of directed (source, target) pairs, both directions per edge."""
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        if self_loops:
            loops = np.arange(self.n_nodes)
            src = np.concatenate([src, loops])
            dst = np.concatenate([dst, loops])
        return np.stack([src, dst])


def node_means(features: FeatureImage, seg: SuperpixelSegmentation) -> np.ndarray:
    flat_labels = seg.labels.ravel()
    counts = segment_sizes(seg).astype(np.float64)
    flat = features.data.reshape(-1, features.channels)
    return np.stack(
        [np.bincount(flat_labels, weights=flat[:, c], minlength=seg.k) for c in range(flat.shape[1])],
        axis=-1,
    ) / counts[:, None]


def build_graph(
    features: FeatureImage, seg: SuperpixelSegmentation, sigma: Optional[float] = None
) -> SuperpixelGraph:
    """Mean-feature nodes joined when their segments share a 4-connected boundary."""
    if (features.height, features.width) != (seg.height, seg.width):
        raise ShapeMismatchError(
            f"Features {features.height}x{features.width} and segmentation "
            f"{seg.height}x{seg.width} differ"
        )
    x = node_means(features, seg)
    edges = adjacent_label_pairs(seg.labels)
    distances = np.linalg.norm(x[edges[:, 0]] - x[edges[:, 1]], axis=1)
    if sigma is None:
        sigma = float(distances.mean()) if distances.size else 0.0
    if sigma > 0.0:
        weights = np.exp(-(distances**2) / (2.0 * sigma**2))
        # keep weights strictly positive under underflow
        weights = np.maximum(weights, np.finfo(np.float64).tiny)
    else:
        weights = np.ones_like(distances)
    graph = SuperpixelGraph(
        n_nodes=seg.k, edges=edges, edge_weights=weights, node_features=x, seg_ref=seg
    )
    logger.info(
        "Built superpixel graph",
        extra={"nodes": graph.n_nodes, "edges": graph.n_edges, "sigma": sigma},
    )
    return graph


def node_to_pixel_lookup(seg: SuperpixelSegmentation) -> List[np.ndarray]:
    """Per segment, an (n_i, 2) array of (row, col) pixel coordinates in raster order."""
    flat = seg.labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.cumsum(segment_sizes(seg))[:-1]
    rows, cols = np.unravel_index(order, seg.labels.shape)
    coords = np.stack([rows, cols], axis=-1)
    return np.split(coords, bounds)


def graph_components(graph: SuperpixelGraph) -> Tuple[int, np.ndarray]:
    adjacency = coo_matrix(
        (np.ones(graph.n_edges), (graph.edges[:, 0], graph.edges[:, 1])),
        shape=(graph.n_nodes, graph.n_nodes),
    )
    return connected_components(adjacency, directed=False)


def export_graph_json(graph: SuperpixelGraph, path: PathLike) -> Path:
    path = Path(path)
    payload = {
        "n_nodes": graph.n_nodes,
        "edges": graph.edges.tolist(),
        "weights": graph.edge_weights.tolist(),
        "features": graph.node_features.tolist(),
    }
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def load_graph_json(path: PathLike, seg: Optional[SuperpixelSegmentation] = None) -> SuperpixelGraph:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return SuperpixelGraph(
        n_nodes=int(payload["n_nodes"]),
        edges=np.asarray(payload["edges"], dtype=np.int64).reshape(-1, 2),
        edge_weights=np.asarray(payload["weights"], dtype=np.float64),
        node_features=np.asarray(payload["features"], dtype=np.float64),
        seg_ref=seg,
    )
