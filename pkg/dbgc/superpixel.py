"""SLIC superpixels over the Pauli RGB image.

The label map produced here is the pixel -> segment assignment consumed by the
superpixel graph and by the F_s broadcast.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Set, Tuple, Union

import numpy as np
from aws_lambda_powertools import Logger
from scipy import ndimage
from skimage.color import rgb2lab
from skimage.segmentation import find_boundaries

from common.errors import InvalidKError, ShapeMismatchError

logger = Logger(service="dbgc", child=True)

PathLike = Union[str, Path]

SEGMENTATION_FILE = "segmentation.bin"
SEGMENTATION_HEADER = "segmentation.json"
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
_MAX_K_FACTOR = 1.5


@dataclass(frozen=True)
class SuperpixelSegmentation:
    labels: np.ndarray
    k: int
    k_target: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if labels.ndim != 2:
            raise ShapeMismatchError(f"Segmentation must be (H, W), got {labels.shape}")
        used = np.unique(labels)
        if used.size != self.k or used[0] != 0 or used[-1] != self.k - 1:
            raise ShapeMismatchError("Segment labels must be contiguous 0..K-1")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def segment_sizes(seg: SuperpixelSegmentation) -> np.ndarray:
    return np.bincount(seg.labels.ravel(), minlength=seg.k)


def relabel_by_first_occurrence(labels: np.ndarray) -> Tuple[np.ndarray, int]:
    """Map arbitrary ids to 0..K-1 in raster order of first appearance."""
    values, first_index, inverse = np.unique(
        labels.ravel(), return_index=True, return_inverse=True
    )
    rank = np.empty(values.size, dtype=np.int64)
    rank[np.argsort(first_index, kind="stable")] = np.arange(values.size)
    return rank[inverse].reshape(labels.shape), int(values.size)


def _grid_shape(height: int, width: int, k_target: int) -> Tuple[int, int]:
    step = math.sqrt(height * width / k_target)
    ny = max(1, min(height, int(round(height / step))))
    nx = max(1, min(width, int(round(width / step))))
    while ny * nx > _MAX_K_FACTOR * k_target and (ny > 1 or nx > 1):
        # shrink the axis whose cells are currently the smallest
        if nx == 1 or (ny > 1 and height / ny <= width / nx):
            ny -= 1
        else:
            nx -= 1
    return ny, nx


def _gradient(lab: np.ndarray) -> np.ndarray:
    padded = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    dx = padded[1:-1, 2:] - padded[1:-1, :-2]
    return np.sum(dy**2, axis=-1) + np.sum(dx**2, axis=-1)


def _initial_centers(lab: np.ndarray, k_target: int) -> np.ndarray:
    """Grid seeds moved to the lowest-gradient pixel of their 3x3 neighbourhood."""
    height, width = lab.shape[:2]
    ny, nx = _grid_shape(height, width, k_target)
    grad = _gradient(lab)
    centers = []
    for i in range(ny):
        for j in range(nx):
            y = min(height - 1, int((i + 0.5) * height / ny))
            x = min(width - 1, int((j + 0.5) * width / nx))
            best_y, best_x, best_g = y, x, grad[y, x]
            for yy in range(max(0, y - 1), min(height, y + 2)):
                for xx in range(max(0, x - 1), min(width, x + 2)):
                    if grad[yy, xx] < best_g:
                        best_y, best_x, best_g = yy, xx, grad[yy, xx]
            centers.append((*lab[best_y, best_x], best_y, best_x))
    return np.asarray(centers, dtype=np.float64)


def _assign(lab: np.ndarray, centers: np.ndarray, step: float, compactness: float) -> np.ndarray:
    height, width = lab.shape[:2]
    distance = np.full((height, width), np.inf)
    labels = np.full((height, width), -1, dtype=np.int64)
    spatial_weight = compactness / step
    for k, (l_, a_, b_, cy, cx) in enumerate(centers):
        y0, y1 = max(0, int(math.floor(cy - step))), min(height, int(math.ceil(cy + step)) + 1)
        x0, x1 = max(0, int(math.floor(cx - step))), min(width, int(math.ceil(cx + step)) + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        window = lab[y0:y1, x0:x1]
        d_lab = np.sqrt(
            (window[..., 0] - l_) ** 2 + (window[..., 1] - a_) ** 2 + (window[..., 2] - b_) ** 2
        )
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d_xy = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        d = d_lab + spatial_weight * d_xy
        region = distance[y0:y1, x0:x1]
        closer = d < region
        region[closer] = d[closer]
        labels[y0:y1, x0:x1][closer] = k
    orphans = labels < 0
    if np.any(orphans):
        # pixels outside every search window go to the spatially nearest center
        oy, ox = np.nonzero(orphans)
        d2 = (oy[:, None] - centers[None, :, 3]) ** 2 + (ox[:, None] - centers[None, :, 4]) ** 2
        labels[oy, ox] = np.argmin(d2, axis=1)
    return labels


def _update_centers(lab: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    height, width = labels.shape
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=len(centers)).astype(np.float64)
    yy, xx = np.mgrid[0:height, 0:width]
    columns = [lab[..., c].ravel() for c in range(3)] + [yy.ravel(), xx.ravel()]
    updated = centers.copy()
    filled = counts > 0
    for c, values in enumerate(columns):
        sums = np.bincount(flat, weights=values, minlength=len(centers))
        updated[filled, c] = sums[filled] / counts[filled]
    return updated


class _ComponentMerger:
    """Union-find over 4-connected components with region adjacency."""

    def __init__(self, components: np.ndarray, n_components: int):
        self.parent = np.arange(n_components)
        self.size = np.bincount(components.ravel(), minlength=n_components)
        self.neighbours: List[Set[int]] = [set() for _ in range(n_components)]
        for a, b in adjacent_label_pairs(components):
            self.neighbours[a].add(b)
            self.neighbours[b].add(a)

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def roots(self) -> List[int]:
        return [i for i in range(len(self.parent)) if self.parent[i] == i]

    def merge_into_largest_neighbour(self, root: int) -> bool:
        candidates = {self.find(n) for n in self.neighbours[root]} - {root}
        if not candidates:
            return False
        # largest neighbour; ties go to the smallest id
        target = min(candidates, key=lambda n: (-self.size[n], n))
        self.parent[root] = target
        self.size[target] += self.size[root]
        self.neighbours[target] |= self.neighbours[root]
        self.neighbours[root] = set()
        return True


def adjacent_label_pairs(labels: np.ndarray) -> np.ndarray:
    horizontal = np.stack([labels[:, :-1].ravel(), labels[:, 1:].ravel()], axis=-1)
    vertical = np.stack([labels[:-1, :].ravel(), labels[1:, :].ravel()], axis=-1)
    pairs = np.concatenate([horizontal, vertical])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.sort(pairs, axis=1), axis=0)


def _enforce_connectivity(labels: np.ndarray, min_size: float, max_k: int) -> np.ndarray:
    components = np.zeros_like(labels)
    n_components = 0
    for k, window in enumerate(ndimage.find_objects(labels + 1)):
        if window is None:
            continue
        pieces, count = ndimage.label(labels[window] == k, structure=_FOUR_CONNECTED)
        mask = pieces > 0
        components[window][mask] = pieces[mask] - 1 + n_components
        n_components += count
    components, n_components = relabel_by_first_occurrence(components)

    merger = _ComponentMerger(components, n_components)
    for comp in range(n_components):
        if merger.find(comp) == comp and merger.size[comp] < min_size:
            merger.merge_into_largest_neighbour(comp)

    roots = merger.roots()
    while len(roots) > max_k:
        # smallest first, ties to the smallest id
        smallest = min(roots, key=lambda r: (merger.size[r], r))
        if not merger.merge_into_largest_neighbour(smallest):
            break
        roots = merger.roots()

    resolved = np.array([merger.find(i) for i in range(n_components)], dtype=np.int64)
    merged, _ = relabel_by_first_occurrence(resolved[components])
    return merged


def slic_segment(
    rgb: np.ndarray,
    k_target: int,
    compactness: float = 10.0,
    iterations: int = 10,
    seed: int = 0,
) -> SuperpixelSegmentation:
    """SLIC in CIELAB with orphan merging.

    Grid seeding makes the result a pure function of the image and parameters;
    `seed` is carried for the run manifest only.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeMismatchError(f"Expected an (H, W, 3) RGB image, got {rgb.shape}")
    height, width = rgb.shape[:2]
    n_pixels = height * width
    if k_target < 1 or k_target > n_pixels:
        raise InvalidKError(f"k_target must be in [1, {n_pixels}], got {k_target}")

    lab = rgb2lab(rgb.astype(np.float64) / 255.0)
    step = math.sqrt(n_pixels / k_target)
    centers = _initial_centers(lab, k_target)
    labels = _assign(lab, centers, step, compactness)
    for _ in range(iterations):
        centers = _update_centers(lab, labels, centers)
        labels = _assign(lab, centers, step, compactness)

    max_k = max(1, int(math.floor(_MAX_K_FACTOR * k_target)))
    labels = _enforce_connectivity(labels, step * step / 4.0, max_k)
    k = int(labels.max()) + 1
    if k != k_target:
        logger.warning("Superpixel count differs from target", extra={"k": k, "k_target": k_target})
    logger.info("Segmented", extra={"k": k, "k_target": k_target, "seed": seed})
    return SuperpixelSegmentation(labels=labels, k=k, k_target=k_target)


# ------------------ export ------------------


def save_segmentation(seg: SuperpixelSegmentation, directory: PathLike) -> Dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data_path = directory / SEGMENTATION_FILE
    header_path = directory / SEGMENTATION_HEADER
    seg.labels.astype("<u4").tofile(data_path)
    header = {"height": seg.height, "width": seg.width, "k": seg.k, "k_target": seg.k_target}
    header_path.write_text(json.dumps(header, indent=2), encoding="utf-8")
    return {"segmentation": data_path, "segmentation_header": header_path}


def load_segmentation(directory: PathLike) -> SuperpixelSegmentation:
    directory = Path(directory)
    header = json.loads((directory / SEGMENTATION_HEADER).read_text(encoding="utf-8"))
    height, width = int(header["height"]), int(header["width"])
    path = directory / SEGMENTATION_FILE
    expected = height * width * 4
    if path.stat().st_size != expected:
        raise ShapeMismatchError(f"{path.name}: expected {expected} bytes")
    labels = np.fromfile(path, dtype="<u4").reshape(height, width).astype(np.int64)
    return SuperpixelSegmentation(labels=labels, k=int(header["k"]), k_target=int(header["k_target"]))


def boundary_overlay(rgb: np.ndarray, seg: SuperpixelSegmentation, color=(255, 255, 0)) -> np.ndarray:
    """Copy of `rgb` with segment boundaries painted in `color`."""
    if rgb.shape[:2] != seg.labels.shape:
        raise ShapeMismatchError("RGB image and segmentation differ in size")
    overlay = np.array(rgb, dtype=np.uint8, copy=True)
    overlay[find_boundaries(seg.labels, mode="inner")] = color
    return overlay
