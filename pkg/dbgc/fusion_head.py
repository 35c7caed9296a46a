import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch
from aws_lambda_powertools import Logger
from torch import nn

from common.errors import InvalidRatioError, ShapeMismatchError, TrainingDivergedError
from common.std_ext import NullObject
from dbgc.config import FusionConfig
from dbgc.graphmae import PixelFeatureMap
from dbgc.pixel_cnn import PatchExtractor, PixelCNN
from dbgc.polsar_data import FeatureImage, LabelSplit

logger = Logger(service="dbgc", child=True)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassificationResult:
    """Predicted class ids per pixel, 1..C (0 is never predicted)."""

    class_map: np.ndarray
    alpha: float

    @property
    def height(self) -> int:
        return self.class_map.shape[0]

    @property
    def width(self) -> int:
        return self.class_map.shape[1]


def fuse(fs, fp, alpha: float):
    """F = alpha * F_s + (1 - alpha) * F_p, elementwise."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidRatioError(f"alpha must be in [0, 1], got {alpha}")
    if tuple(fs.shape) != tuple(fp.shape):
        raise ShapeMismatchError(f"Cannot fuse {tuple(fs.shape)} with {tuple(fp.shape)}")
    return alpha * fs + (1.0 - alpha) * fp


class ClassifierHead(nn.Module):
    def __init__(self, embedding_dim: int, n_classes: int):
        super().__init__()
        self.fc = nn.Linear(embedding_dim, n_classes)
        nn.init.xavier_uniform_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    @property
    def n_classes(self) -> int:
        return self.fc.out_features

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.fc(f)


def build_head(embedding_dim: int, n_classes: int, seed: int, dtype: torch.dtype = torch.float32) -> ClassifierHead:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = ClassifierHead(embedding_dim, n_classes)
    return head.to(dtype)


def classify(f: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    """Softmax class probabilities; torch.softmax subtracts the row max."""
    return torch.softmax(head(f), dim=-1)


def predict_classes(probs: torch.Tensor) -> torch.Tensor:
    # argmax returns the first maximal index, i.e. the smallest class on ties
    return torch.argmax(probs, dim=-1)


def cross_entropy(probs: torch.Tensor, true_class) -> torch.Tensor:
    """-log p[true_class] with p clamped below; averaged over a leading batch axis."""
    target = torch.as_tensor(true_class, dtype=torch.long)
    picked = probs.gather(-1, target.reshape(*target.shape, 1)).squeeze(-1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


class JointTrainer:
    """Supervised training of the CNN and the head on fused features.

    F_s comes precomputed from the frozen encoder; only `cnn` and `head` are updated.
    """

    def __init__(self, config: FusionConfig, logger=None):
        self.config = config
        if logger is None:
            logger = NullObject()
        self.logger = logger

    def batch_loss(self, fs_batch, patches, targets, cnn: PixelCNN, head: ClassifierHead) -> torch.Tensor:
        fp = cnn(patches)
        f = fuse(fs_batch, fp, self.config.alpha)
        return cross_entropy(classify(f, head), targets)

    def __call__(
        self,
        fs_map: PixelFeatureMap,
        features: FeatureImage,
        split: LabelSplit,
        cnn: PixelCNN,
        head: ClassifierHead,
    ) -> Tuple[PixelCNN, ClassifierHead, List[float]]:
        config = self.config
        dtype = next(cnn.parameters()).dtype
        coords = split.train_coords
        if (fs_map.height, fs_map.width) != (features.height, features.width):
            raise ShapeMismatchError("F_s map and feature image differ in size")
        if fs_map.d != cnn.embedding_dim:
            raise ShapeMismatchError(f"F_s has {fs_map.d} dims, the CNN emits {cnn.embedding_dim}")

        patches = torch.as_tensor(PatchExtractor(features, cnn.patch_size)(coords[:, :2]), dtype=dtype)
        fs = torch.as_tensor(fs_map.take(coords[:, 0], coords[:, 1]), dtype=dtype)
        targets = torch.as_tensor(coords[:, 2] - 1, dtype=torch.long)
        n_train = targets.shape[0]

        optimizer = torch.optim.Adam(
            list(cnn.parameters()) + list(head.parameters()), lr=config.lr, weight_decay=0.0
        )
        rng = np.random.default_rng(config.seed)
        self.logger.info(
            "Joint training",
            extra={"train_pixels": n_train, "epochs": config.epochs, "alpha": config.alpha, "seed": config.seed},
        )

        history: List[float] = []
        cnn.train()
        head.train()
        for epoch in range(config.epochs):
            order = torch.as_tensor(rng.permutation(n_train), dtype=torch.long)
            total = 0.0
            for start in range(0, n_train, config.batch_size):
                idx = order[start : start + config.batch_size]
                optimizer.zero_grad()
                loss = self.batch_loss(fs[idx], patches[idx], targets[idx], cnn, head)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise TrainingDivergedError(f"Joint loss became {value} at epoch {epoch}")
                loss.backward()
                optimizer.step()
                total += value * idx.shape[0]
            history.append(total / n_train)
            self.logger.debug("Joint epoch", extra={"epoch": epoch, "loss": history[-1]})

        cnn.eval()
        head.eval()
        return cnn, head, history


def train_joint(
    fs_map: PixelFeatureMap,
    features: FeatureImage,
    split: LabelSplit,
    cnn: PixelCNN,
    head: ClassifierHead,
    cfg: FusionConfig,
    logger=None,
) -> Tuple[PixelCNN, ClassifierHead, List[float]]:
    return JointTrainer(cfg, logger=logger)(fs_map, features, split, cnn, head)


def predict_pixels(
    rows, cols, fs_map: PixelFeatureMap, extractor: PatchExtractor, cnn: PixelCNN, head: ClassifierHead, alpha: float
) -> np.ndarray:
    """Class ids (1..C) for the given pixels."""
    dtype = next(head.parameters()).dtype
    fs = torch.as_tensor(fs_map.take(rows, cols), dtype=dtype)
    if alpha == 1.0:
        # F_p carries zero weight
        fp = torch.zeros_like(fs)
    else:
        patches = torch.as_tensor(extractor(np.stack([rows, cols], axis=-1)), dtype=dtype)
        fp = cnn(patches)
    probs = classify(fuse(fs, fp, alpha), head)
    return predict_classes(probs).cpu().numpy() + 1


def predict_map(
    fs_map: PixelFeatureMap,
    features: FeatureImage,
    cnn: PixelCNN,
    head: ClassifierHead,
    alpha: float,
    batch_size: int = 1024,
) -> ClassificationResult:
    extractor = PatchExtractor(features, cnn.patch_size)
    height, width = features.height, features.width
    rows, cols = np.divmod(np.arange(height * width), width)
    predictions = np.empty(height * width, dtype=np.int64)
    cnn.eval()
    head.eval()
    with torch.no_grad():
        for start in range(0, height * width, batch_size):
            stop = min(start + batch_size, height * width)
            predictions[start:stop] = predict_pixels(
                rows[start:stop], cols[start:stop], fs_map, extractor, cnn, head, alpha
            )
    logger.info("Predicted class map", extra={"height": height, "width": width, "alpha": alpha})
    return ClassificationResult(class_map=predictions.reshape(height, width), alpha=alpha)
