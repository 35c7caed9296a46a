"""Superpixel branch: masked graph autoencoder with GAT encoder/decoder.

Nodes are masked with a learnable encoder token, encoded by a stack of
multi-head GAT layers, re-masked with a decoder token and decoded by one GAT
layer; the scaled cosine error over the masked nodes drives pretraining.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from aws_lambda_powertools import Logger
from torch import nn

from common.errors import EmptyMaskError, InvalidRatioError, NumericalError, TrainingDivergedError
from common.std_ext import NullObject
from dbgc.config import GraphMAEConfig
from dbgc.superpixel import SuperpixelSegmentation
from dbgc.supergraph import SuperpixelGraph

logger = Logger(service="dbgc", child=True)

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-12

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class MaskedGraph:
    base: SuperpixelGraph
    mask_set: np.ndarray
    masked_features: np.ndarray


@dataclass(frozen=True)
class PixelFeatureMap:
    """Superpixel embeddings broadcast to pixels (F_s).

    Stored as node embeddings plus the label map; pixels are materialized on demand.
    """

    node_embeddings: np.ndarray
    labels: np.ndarray

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def d(self) -> int:
        return self.node_embeddings.shape[1]

    @property
    def values(self) -> np.ndarray:
        return self.node_embeddings[self.labels]

    def take(self, rows, cols) -> np.ndarray:
        return self.node_embeddings[self.labels[rows, cols]]


# ------------------ masking ------------------


def sample_mask(n_nodes: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted ids of floor(ratio * n + 0.5) nodes drawn without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise InvalidRatioError(f"mask ratio must be in [0, 1], got {ratio}")
    n_mask = int(math.floor(ratio * n_nodes + 0.5))
    return np.sort(rng.choice(n_nodes, size=n_mask, replace=False))


def mask_nodes(g: SuperpixelGraph, ratio: float, token, seed: int) -> MaskedGraph:
    if isinstance(token, torch.Tensor):
        token = token.detach().cpu().numpy()
    token = np.asarray(token, dtype=np.float64).reshape(-1)
    if token.shape[0] != g.node_features.shape[1]:
        raise ValueError(f"token has {token.shape[0]} values, features have {g.node_features.shape[1]}")
    mask_set = sample_mask(g.n_nodes, ratio, np.random.default_rng(seed))
    masked = np.array(g.node_features, copy=True)
    masked[mask_set] = token
    return MaskedGraph(base=g, mask_set=mask_set, masked_features=masked)


# ------------------ GAT ------------------


def gat_forward(
    x: torch.Tensor,
    edge_index: torch.Tensor,
    weight: torch.Tensor,
    attn_src: torch.Tensor,
    attn_dst: torch.Tensor,
    concat: bool = True,
    activation: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    return_attention: bool = False,
):
    """One multi-head GAT layer over directed (source, target) pairs.

    `edge_index` must already contain every self-loop. `weight` is (F, H*F'),
    `attn_src`/`attn_dst` are (H, F'); the score of edge j -> i is
    LeakyReLU(attn_dst . h_i + attn_src . h_j).
    """
    for name, param in (("weight", weight), ("attn_src", attn_src), ("attn_dst", attn_dst)):
        if not torch.isfinite(param).all():
            raise NumericalError(f"GAT parameter {name} is not finite")
    n = x.shape[0]
    heads, out_dim = attn_src.shape
    h = (x @ weight).view(n, heads, out_dim)
    src, dst = edge_index[0], edge_index[1]

    scores = F.leaky_relu(
        (h * attn_dst).sum(-1)[dst] + (h * attn_src).sum(-1)[src], LEAKY_SLOPE
    )
    # softmax over each target's neighbourhood; the shift is a constant per row
    row_max = torch.full((n, heads), -math.inf, dtype=h.dtype).scatter_reduce(
        0, dst.unsqueeze(-1).expand(-1, heads), scores.detach(), reduce="amax", include_self=True
    )
    exp_scores = torch.exp(scores - row_max[dst])
    denom = torch.zeros(n, heads, dtype=h.dtype).index_add(0, dst, exp_scores)
    attention = exp_scores / denom[dst]

    out = torch.zeros(n, heads, out_dim, dtype=h.dtype).index_add(
        0, dst, attention.unsqueeze(-1) * h[src]
    )
    if activation is not None:
        out = activation(out)
    out = out.reshape(n, heads * out_dim) if concat else out.mean(dim=1)
    if return_attention:
        return out, attention
    return out


class GATLayer(nn.Module):
    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        heads: int,
        concat: bool = True,
        activation: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.heads = heads
        self.concat = concat
        self.activation = activation
        self.weight = nn.Parameter(torch.empty(in_dim, heads * out_dim))
        self.attn_src = nn.Parameter(torch.empty(heads, out_dim))
        self.attn_dst = nn.Parameter(torch.empty(heads, out_dim))
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.xavier_uniform_(self.weight)
        nn.init.xavier_uniform_(self.attn_src)
        nn.init.xavier_uniform_(self.attn_dst)

    @property
    def output_dim(self) -> int:
        return self.heads * self.out_dim if self.concat else self.out_dim

    def forward(self, x, edge_index, return_attention: bool = False):
        return gat_forward(
            x,
            edge_index,
            self.weight,
            self.attn_src,
            self.attn_dst,
            concat=self.concat,
            activation=self.activation,
            return_attention=return_attention,
        )


# ------------------ loss ------------------


def sce_loss(x: torch.Tensor, z: torch.Tensor, gamma: float = 3.0) -> torch.Tensor:
    """Mean of (1 - cos(x_i, z_i))^gamma over rows."""
    if x.shape[0] == 0:
        raise EmptyMaskError("Scaled cosine error needs at least one masked node")
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    x = F.normalize(x, p=2, dim=-1, eps=NORM_EPS)
    z = F.normalize(z, p=2, dim=-1, eps=NORM_EPS)
    error = (1.0 - (x * z).sum(dim=-1)).clamp_min(0.0)
    return error.pow(gamma).mean()


# ------------------ model ------------------


class GraphMAE(nn.Module):
    def __init__(self, config: GraphMAEConfig):
        super().__init__()
        self.config = config
        embedding_dim = config.embedding_dim
        self.enc_mask_token = nn.Parameter(torch.zeros(1, config.in_dim))
        self.dec_mask_token = nn.Parameter(torch.zeros(1, embedding_dim))
        self.encoder = nn.ModuleList(
            GATLayer(
                config.in_dim if layer == 0 else embedding_dim,
                config.head_dim,
                config.heads,
                concat=True,
                activation=F.elu if layer < config.encoder_layers - 1 else None,
            )
            for layer in range(config.encoder_layers)
        )
        self.decoder = GATLayer(embedding_dim, config.in_dim, config.heads, concat=False)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def encode(self, x: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        h = x
        for layer in self.encoder:
            h = layer(h, edge_index)
        return h

    def reconstruct(
        self, x: torch.Tensor, edge_index: torch.Tensor, mask_idx: torch.Tensor, gamma: float
    ) -> torch.Tensor:
        if mask_idx.numel() == 0:
            raise EmptyMaskError("No nodes were masked; the reconstruction loss is undefined")
        mask = torch.zeros(x.shape[0], dtype=torch.bool)
        mask[mask_idx] = True
        masked_x = torch.where(mask.unsqueeze(-1), self.enc_mask_token, x)
        e = self.encode(masked_x, edge_index)
        e = torch.where(mask.unsqueeze(-1), self.dec_mask_token, e)
        z = self.decoder(e, edge_index)
        return sce_loss(x[mask_idx], z[mask_idx], gamma)


def build_graphmae(config: GraphMAEConfig, seed: Optional[int] = None) -> GraphMAE:
    """Freshly initialized model; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed if seed is None else seed)
        model = GraphMAE(config)
    return model.to(_DTYPES[config.dtype])


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def graph_tensors(g: SuperpixelGraph, dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(g.node_features, dtype=dtype)
    edge_index = torch.as_tensor(g.edge_index(self_loops=True), dtype=torch.long)
    return x, edge_index


def forward_reconstruct(
    g: SuperpixelGraph, model: GraphMAE, ratio: float, seed: int, gamma: Optional[float] = None
) -> Tuple[torch.Tensor, np.ndarray]:
    mask_set = sample_mask(g.n_nodes, ratio, np.random.default_rng(seed))
    x, edge_index = graph_tensors(g, model_dtype(model))
    loss = model.reconstruct(
        x, edge_index, torch.as_tensor(mask_set, dtype=torch.long),
        model.config.gamma if gamma is None else gamma,
    )
    return loss, mask_set


class GraphMAEPretrainer:
    """Full-graph self-supervised training with a fresh mask every epoch."""

    def __init__(self, config: GraphMAEConfig, logger=None):
        self.config = config
        if logger is None:
            logger = NullObject()
        self.logger = logger

    def __call__(self, g: SuperpixelGraph, model: Optional[GraphMAE] = None) -> Tuple[GraphMAE, List[float]]:
        config = self.config
        if model is None:
            model = build_graphmae(config)
        x, edge_index = graph_tensors(g, model_dtype(model))
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=0.0)
        rng = np.random.default_rng(config.seed)
        self.logger.info(
            "Pretraining GraphMAE",
            extra={"nodes": g.n_nodes, "edges": g.n_edges, "epochs": config.epochs, "seed": config.seed},
        )

        history: List[float] = []
        model.train()
        for epoch in range(config.epochs):
            mask_idx = torch.as_tensor(sample_mask(g.n_nodes, config.ratio, rng), dtype=torch.long)
            optimizer.zero_grad()
            loss = model.reconstruct(x, edge_index, mask_idx, config.gamma)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(f"Pretraining loss became {value} at epoch {epoch}")
            loss.backward()
            optimizer.step()
            history.append(value)
            self.logger.debug("Pretrain epoch", extra={"epoch": epoch, "loss": value})

        model.eval()
        if history:
            self.logger.info("Pretraining finished", extra={"first_loss": history[0], "last_loss": history[-1]})
        return model, history


def pretrain(g: SuperpixelGraph, config: GraphMAEConfig, logger=None) -> Tuple[GraphMAE, List[float]]:
    return GraphMAEPretrainer(config, logger=logger)(g)


def encode_graph(g: SuperpixelGraph, model: GraphMAE) -> np.ndarray:
    """Unmasked node embeddings e_i as a (K, D) float64 array."""
    x, edge_index = graph_tensors(g, model_dtype(model))
    was_training = model.training
    model.eval()
    with torch.no_grad():
        e = model.encode(x, edge_index)
    model.train(was_training)
    return e.cpu().numpy().astype(np.float64)


def encode_and_broadcast(
    g: SuperpixelGraph, model: GraphMAE, seg: Union[SuperpixelSegmentation, None] = None
) -> PixelFeatureMap:
    seg = seg if seg is not None else g.seg_ref
    if seg is None or seg.k != g.n_nodes:
        raise ValueError("A segmentation matching the graph is required to broadcast F_s")
    return PixelFeatureMap(node_embeddings=encode_graph(g, model), labels=seg.labels)
