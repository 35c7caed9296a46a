"""Pixel branch: mirror-padded patches and the four-block patch CNN producing F_p."""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
from aws_lambda_powertools import Logger
from torch import nn

from common.errors import InvalidPatchSizeError, NumericalError, OutOfBoundsError
from dbgc.config import CnnConfig
from dbgc.polsar_data import FeatureImage

logger = Logger(service="dbgc", child=True)

POOL_AFTER = (1, 3)  # zero-based blocks followed by 2x2 max pooling
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class Patch:
    center: Tuple[int, int]
    data: np.ndarray


def _check_patch_size(n: int) -> None:
    if n < 1 or n % 2 == 0:
        raise InvalidPatchSizeError(f"Patch size must be a positive odd number, got {n}")


class PatchExtractor:
    """n x n windows around pixel centers over a reflect-padded copy of the image."""

    def __init__(self, features: FeatureImage, n: int):
        _check_patch_size(n)
        self.n = n
        self.radius = n // 2
        self.height = features.height
        self.width = features.width
        r = self.radius
        self.padded = np.pad(features.data, ((r, r), (r, r), (0, 0)), mode="reflect")

    def __call__(self, centers) -> np.ndarray:
        """(N, 2) row/col centers -> (N, n, n, channels) patches."""
        centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
        outside = (
            (centers[:, 0] < 0)
            | (centers[:, 0] >= self.height)
            | (centers[:, 1] < 0)
            | (centers[:, 1] >= self.width)
        )
        if np.any(outside):
            raise OutOfBoundsError(
                f"Patch centers outside the {self.height}x{self.width} image: "
                f"{centers[outside][:5].tolist()}"
            )
        offsets = np.arange(self.n)
        rows = centers[:, 0, None] + offsets
        cols = centers[:, 1, None] + offsets
        return self.padded[rows[:, :, None], cols[:, None, :]]

    def patch(self, center: Tuple[int, int]) -> Patch:
        data = self(np.asarray([center]))[0]
        return Patch(center=(int(center[0]), int(center[1])), data=data)


def extract_patch(features: FeatureImage, center: Tuple[int, int], n: int) -> Patch:
    return PatchExtractor(features, n).patch(center)


class PixelCNN(nn.Module):
    """conv3x3+ReLU blocks with pooling after the second and fourth, then one FC layer."""

    def __init__(
        self,
        in_channels: int = 9,
        channels: Sequence[int] = (128, 256, 512, 512),
        patch_size: int = 15,
        embedding_dim: int = 64,
    ):
        super().__init__()
        spatial = patch_size
        for _ in POOL_AFTER:
            spatial //= 2
        if spatial < 1:
            raise InvalidPatchSizeError(f"Patch size {patch_size} collapses under two poolings")
        self.patch_size = patch_size
        self.embedding_dim = embedding_dim
        self.convs = nn.ModuleList()
        previous = in_channels
        for width in channels:
            self.convs.append(nn.Conv2d(previous, width, kernel_size=3, stride=1, padding=1))
            previous = width
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)
        self.fc = nn.Linear(previous * spatial * spatial, embedding_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for conv in self.convs:
            nn.init.kaiming_uniform_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        nn.init.xavier_uniform_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def _check_finite(self):
        for name, param in self.named_parameters():
            if not torch.isfinite(param).all():
                raise NumericalError(f"CNN parameter {name} is not finite")

    def forward(self, patches: torch.Tensor, return_blocks: bool = False):
        """`patches` is channels-last (N, n, n, C) as produced by PatchExtractor."""
        self._check_finite()
        if patches.ndim != 4 or patches.shape[1:3] != (self.patch_size, self.patch_size):
            raise InvalidPatchSizeError(
                f"Expected (N, {self.patch_size}, {self.patch_size}, C) patches, got {tuple(patches.shape)}"
            )
        x = patches.permute(0, 3, 1, 2)
        blocks: List[torch.Tensor] = []
        for index, conv in enumerate(self.convs):
            x = torch.relu(conv(x))
            blocks.append(x)
            if index in POOL_AFTER:
                x = self.pool(x)
        out = self.fc(x.flatten(start_dim=1))
        if return_blocks:
            return out, blocks
        return out


def build_pixel_cnn(config: CnnConfig, embedding_dim: int, seed: int, in_channels: int = 9) -> PixelCNN:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PixelCNN(
            in_channels=in_channels,
            channels=config.channels,
            patch_size=config.patch_size,
            embedding_dim=embedding_dim,
        )
    logger.debug(
        "Built pixel CNN",
        extra={"patch_size": config.patch_size, "channels": list(config.channels), "seed": seed},
    )
    return model.to(_DTYPES[config.dtype])


def cnn_forward(patches, model: PixelCNN) -> torch.Tensor:
    """F_p rows for a batch of patches (arrays, tensors or Patch objects)."""
    if isinstance(patches, (list, tuple)) and patches and isinstance(patches[0], Patch):
        sizes = {p.data.shape for p in patches}
        if len(sizes) != 1:
            raise InvalidPatchSizeError(f"Patches in a batch must share one size, got {sizes}")
        patches = np.stack([p.data for p in patches])
    if not isinstance(patches, torch.Tensor):
        patches = np.asarray(patches)
    dtype = next(model.parameters()).dtype
    return model(torch.as_tensor(patches, dtype=dtype))
