"""PolSAR data model: coherency ingestion, feature vectors, Pauli RGB, ground truth
and the multi-look Wishart scene generator used for desk-scale runs."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from aws_lambda_powertools import Logger
from scipy.spatial import cKDTree

from common.errors import (
    ClassTooSmallError,
    CorruptDataError,
    FeatureStateError,
    InvalidSpecError,
    MissingChannelError,
    ShapeMismatchError,
)
from dbgc.config import SceneSpec

logger = Logger(service="dbgc", child=True)

PathLike = Union[str, Path]

CHANNEL_NAMES = (
    "T11",
    "T22",
    "T33",
    "T12_real",
    "T12_imag",
    "T13_real",
    "T13_imag",
    "T23_real",
    "T23_imag",
)
N_FEATURES = len(CHANNEL_NAMES)
HEADER_FILE = "header.json"
GROUND_TRUTH_FILE = "ground_truth.bin"

# (row, col) of the upper-triangle entries in feature order
_OFF_DIAGONAL = ((0, 1), (0, 2), (1, 2))

FLEVOLAND_CLASS_NAMES = (
    "Water",
    "Barley",
    "Peas",
    "Stembean",
    "Beet",
    "Forest",
    "Bare soil",
    "Grass",
    "Rapeseed",
    "Lucerne",
    "Wheat 1",
    "Wheat 2",
    "Building",
    "Potato",
    "Wheat 3",
)

_HERMITIAN_RTOL = 1e-9
_ZERO_VARIANCE_RTOL = 1e-12


def _read_only(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class CoherencyImage:
    """Per-pixel 3x3 Hermitian coherency matrices, shape (H, W, 3, 3)."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.complex128)
        if t.ndim != 4 or t.shape[2:] != (3, 3):
            raise ShapeMismatchError(f"Coherency must be (H, W, 3, 3), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise CorruptDataError("Coherency matrix contains non-finite values")
        scale = max(float(np.max(np.abs(t), initial=0.0)), 1.0)
        tol = _HERMITIAN_RTOL * scale
        if np.max(np.abs(t - np.conj(np.swapaxes(t, 2, 3))), initial=0.0) > tol:
            raise CorruptDataError("Coherency matrix is not Hermitian")
        diag = np.diagonal(t, axis1=2, axis2=3)
        if np.min(diag.real, initial=0.0) < -tol:
            raise CorruptDataError("Coherency diagonal has negative power")
        object.__setattr__(self, "t", _read_only(t))

    @property
    def height(self) -> int:
        return self.t.shape[0]

    @property
    def width(self) -> int:
        return self.t.shape[1]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.std <= _ZERO_VARIANCE_RTOL * np.maximum(1.0, np.abs(self.mean))

    @property
    def safe_std(self) -> np.ndarray:
        return np.where(self.degenerate, 1.0, self.std)

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "NormStats":
        return cls(
            mean=np.asarray(data["mean"], dtype=np.float64),
            std=np.asarray(data["std"], dtype=np.float64),
        )


@dataclass(frozen=True)
class FeatureImage:
    """Nine real channels per pixel in the order of CHANNEL_NAMES."""

    data: np.ndarray
    normalized: bool = False
    norm_stats: Optional[NormStats] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != N_FEATURES:
            raise ShapeMismatchError(
                f"Feature image must be (H, W, {N_FEATURES}), got {data.shape}"
            )
        if self.normalized and self.norm_stats is None:
            raise FeatureStateError("Normalized features need their norm_stats")
        object.__setattr__(self, "data", _read_only(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class GroundTruth:
    """Per-pixel class ids, 0 = unlabeled, 1..C = classes."""

    labels: np.ndarray
    class_names: Tuple[str, ...]

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeMismatchError(f"Ground truth must be (H, W), got {labels.shape}")
        names = tuple(self.class_names)
        n_classes = len(names)
        if labels.size and (labels.min() < 0 or labels.max() > n_classes):
            raise CorruptDataError(f"Ground-truth labels must lie in [0, {n_classes}]")
        present = np.bincount(labels.ravel().astype(np.int64), minlength=n_classes + 1)
        missing = [names[c - 1] for c in range(1, n_classes + 1) if present[c] == 0]
        if missing:
            raise CorruptDataError(f"Classes without labeled pixels: {missing}")
        object.__setattr__(self, "labels", _read_only(labels.astype(np.int64)))
        object.__setattr__(self, "class_names", names)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class LabelSplit:
    """Train/test pixels as (row, col, class) rows."""

    train_coords: np.ndarray
    test_coords: np.ndarray
    seed: int
    per_class: int
    empty_test_classes: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for name in ("train_coords", "test_coords"):
            coords = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 3)
            object.__setattr__(self, name, _read_only(coords))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "per_class": self.per_class,
            "empty_test_classes": list(self.empty_test_classes),
            "train": self.train_coords.tolist(),
            "test": self.test_coords.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LabelSplit":
        return cls(
            train_coords=np.asarray(data["train"], dtype=np.int64),
            test_coords=np.asarray(data["test"], dtype=np.int64),
            seed=int(data["seed"]),
            per_class=int(data["per_class"]),
            empty_test_classes=tuple(data.get("empty_test_classes", ())),
        )


# ------------------ file IO ------------------


def read_header(directory: PathLike) -> dict:
    path = Path(directory) / HEADER_FILE
    if not path.is_file():
        raise MissingChannelError(f"Missing header file: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _dimensions(header: dict) -> Tuple[int, int]:
    try:
        height, width = int(header["height"]), int(header["width"])
    except (KeyError, TypeError, ValueError) as e:
        raise ShapeMismatchError(f"Header must declare integer height/width: {header}") from e
    if height < 1 or width < 1:
        raise ShapeMismatchError(f"Header dimensions must be positive: {header}")
    return height, width


def _read_raw(path: Path, height: int, width: int, dtype: str) -> np.ndarray:
    if not path.is_file():
        raise MissingChannelError(f"Missing channel file: {path}")
    expected = height * width * np.dtype(dtype).itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise ShapeMismatchError(
            f"{path.name}: expected {expected} bytes for {height}x{width}, got {actual}"
        )
    return np.fromfile(path, dtype=dtype).reshape(height, width)


def coherency_from_channels(channels: np.ndarray) -> np.ndarray:
    """Assemble (..., 3, 3) Hermitian matrices from (..., 9) channels."""
    channels = np.asarray(channels, dtype=np.float64)
    t = np.zeros(channels.shape[:-1] + (3, 3), dtype=np.complex128)
    for i in range(3):
        t[..., i, i] = channels[..., i]
    for n, (i, j) in enumerate(_OFF_DIAGONAL):
        value = channels[..., 3 + 2 * n] + 1j * channels[..., 4 + 2 * n]
        t[..., i, j] = value
        t[..., j, i] = np.conj(value)
    return t


def load_coherency(directory: PathLike, header: Optional[dict] = None) -> CoherencyImage:
    directory = Path(directory)
    if header is None:
        header = read_header(directory)
    height, width = _dimensions(header)
    channels = []
    for name in CHANNEL_NAMES:
        raw = _read_raw(directory / f"{name}.bin", height, width, "<f4")
        if not np.all(np.isfinite(raw)):
            raise CorruptDataError(f"{name}.bin contains non-finite values")
        channels.append(raw.astype(np.float64))
    logger.info("Loaded coherency", extra={"directory": str(directory), "height": height, "width": width})
    return CoherencyImage(coherency_from_channels(np.stack(channels, axis=-1)))


def _write_header(directory: Path, updates: dict) -> None:
    path = directory / HEADER_FILE
    header = json.loads(path.read_text(encoding="utf-8")) if path.is_file() else {}
    header.update(updates)
    path.write_text(json.dumps(header, indent=2), encoding="utf-8")


def save_coherency(coh: CoherencyImage, directory: PathLike) -> None:
    """Write the nine float32 channel files plus header.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    features = extract_features(coh).data
    for index, name in enumerate(CHANNEL_NAMES):
        np.ascontiguousarray(features[..., index]).astype("<f4").tofile(directory / f"{name}.bin")
    _write_header(directory, {"height": coh.height, "width": coh.width})


def load_ground_truth(directory: PathLike, header: Optional[dict] = None) -> GroundTruth:
    directory = Path(directory)
    if header is None:
        header = read_header(directory)
    height, width = _dimensions(header)
    labels = _read_raw(directory / GROUND_TRUTH_FILE, height, width, "u1")
    names = header.get("class_names")
    if names is None:
        n_classes = int(labels.max())
        if n_classes == len(FLEVOLAND_CLASS_NAMES):
            names = list(FLEVOLAND_CLASS_NAMES)
        else:
            names = [f"class_{c}" for c in range(1, n_classes + 1)]
    return GroundTruth(labels=labels, class_names=tuple(names))


def save_ground_truth(gt: GroundTruth, directory: PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    gt.labels.astype("u1").tofile(directory / GROUND_TRUTH_FILE)
    _write_header(
        directory,
        {"height": gt.height, "width": gt.width, "class_names": list(gt.class_names)},
    )


# ------------------ features ------------------


def extract_features(coh: CoherencyImage) -> FeatureImage:
    t = coh.t
    channels = [t[..., i, i].real for i in range(3)]
    for i, j in _OFF_DIAGONAL:
        channels.extend((t[..., i, j].real, t[..., i, j].imag))
    return FeatureImage(np.stack(channels, axis=-1))


def features_to_coherency(f: FeatureImage) -> CoherencyImage:
    if f.normalized:
        raise FeatureStateError("Denormalize features before rebuilding coherency")
    return CoherencyImage(coherency_from_channels(f.data))


def normalize_features(f: FeatureImage) -> FeatureImage:
    """Per-channel z-score over all pixels; zero-variance channels become 0."""
    if f.normalized:
        raise FeatureStateError("Features are already normalized")
    flat = f.data.reshape(-1, f.channels)
    stats = NormStats(mean=flat.mean(axis=0), std=flat.std(axis=0))
    data = (f.data - stats.mean) / stats.safe_std
    data[..., stats.degenerate] = 0.0
    if np.any(stats.degenerate):
        logger.debug(
            "Zero-variance channels mapped to 0",
            extra={"channels": [CHANNEL_NAMES[i] for i in np.flatnonzero(stats.degenerate)]},
        )
    return FeatureImage(data, normalized=True, norm_stats=stats)


def denormalize_features(f: FeatureImage) -> FeatureImage:
    if not f.normalized:
        raise FeatureStateError("Features are not normalized")
    stats = f.norm_stats
    return FeatureImage(f.data * stats.safe_std + stats.mean)


# ------------------ rendering ------------------


def pauli_rgb(coh: CoherencyImage, percentile: float = 99.0) -> np.ndarray:
    """8-bit (H, W, 3) Pauli composite: R=T22, G=T33, B=T11."""
    diag = np.diagonal(coh.t, axis1=2, axis2=3).real
    rgb = np.zeros(diag.shape, dtype=np.uint8)
    for out_channel, diag_index in enumerate((1, 2, 0)):
        values = diag[..., diag_index]
        clip = float(np.percentile(values, percentile))
        if clip <= 0.0:
            continue
        scaled = np.clip(values / clip, 0.0, 1.0) * 255.0
        rgb[..., out_channel] = np.round(scaled).astype(np.uint8)
    return rgb


# ------------------ synthetic scenes ------------------

_CANONICAL_COVARIANCES = (
    # surface
    np.diag([1.0, 0.12, 0.03]).astype(np.complex128),
    # double bounce
    np.diag([0.15, 1.2, 0.06]).astype(np.complex128),
    # volume
    np.diag([0.45, 0.4, 0.38]).astype(np.complex128),
    # bright, correlated surface
    np.array(
        [[2.2, 0.6 + 0.35j, 0.05], [0.6 - 0.35j, 0.5, 0.0], [0.05, 0.0, 0.1]],
        dtype=np.complex128,
    ),
    # dark
    np.diag([0.06, 0.035, 0.02]).astype(np.complex128),
)


def default_class_covariances(n_classes: int) -> List[np.ndarray]:
    """Built-in per-class covariances; classes beyond the canonical five are random PSD."""
    covs = [c.copy() for c in _CANONICAL_COVARIANCES[:n_classes]]
    rng = np.random.default_rng(len(_CANONICAL_COVARIANCES))
    while len(covs) < n_classes:
        a = rng.standard_normal((3, 6)) + 1j * rng.standard_normal((3, 6))
        covs.append(a @ a.conj().T / 6.0 * rng.uniform(0.2, 2.0))
    return covs


def _psd_sqrt(sigma: np.ndarray, class_index: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.complex128)
    if sigma.shape != (3, 3):
        raise InvalidSpecError(f"Class {class_index}: covariance must be 3x3")
    scale = max(float(np.max(np.abs(sigma))), 1.0)
    if not np.allclose(sigma, sigma.conj().T, rtol=0.0, atol=1e-10 * scale):
        raise InvalidSpecError(f"Class {class_index}: covariance is not Hermitian")
    eigvals, eigvecs = np.linalg.eigh(sigma)
    if eigvals.min() < -1e-10 * scale:
        raise InvalidSpecError(
            f"Class {class_index}: covariance is not positive semi-definite "
            f"(min eigenvalue {eigvals.min():.3g})"
        )
    root = np.sqrt(np.clip(eigvals, 0.0, None))
    return (eigvecs * root) @ eigvecs.conj().T


def _voronoi_layout(height: int, width: int, n_regions: int, rng) -> np.ndarray:
    sites = rng.choice(height * width, size=n_regions, replace=False)
    site_coords = np.stack(np.unravel_index(sites, (height, width)), axis=-1)
    rows, cols = np.mgrid[0:height, 0:width]
    _, nearest = cKDTree(site_coords).query(np.stack([rows.ravel(), cols.ravel()], axis=-1))
    return nearest.reshape(height, width)


def synth_scene(spec: SceneSpec, seed: int) -> Tuple[CoherencyImage, GroundTruth]:
    """Voronoi scene whose pixels are L-look sample covariances of their class."""
    if spec.covariances is not None:
        covariances = [m.to_numpy() for m in spec.covariances]
    else:
        covariances = default_class_covariances(spec.n_classes)
    roots = np.stack([_psd_sqrt(c, i + 1) for i, c in enumerate(covariances)])

    rng = np.random.default_rng(seed)
    regions = _voronoi_layout(spec.height, spec.width, spec.n_regions, rng)
    # every class owns at least one region because n_regions >= n_classes
    region_class = rng.permutation(np.arange(spec.n_regions) % spec.n_classes)
    classes = region_class[regions]

    shape = (spec.height, spec.width, spec.looks, 3)
    z = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    k = np.einsum("hwij,hwlj->hwli", roots[classes], z)
    t = np.einsum("hwli,hwlj->hwij", k, k.conj()) / spec.looks
    t = 0.5 * (t + np.conj(np.swapaxes(t, 2, 3)))
    diag = np.arange(3)
    t[..., diag, diag] = t[..., diag, diag].real

    names = spec.class_names or [f"class_{c}" for c in range(1, spec.n_classes + 1)]
    logger.info(
        "Synthesized scene",
        extra={"height": spec.height, "width": spec.width, "classes": spec.n_classes, "looks": spec.looks},
    )
    return CoherencyImage(t), GroundTruth(labels=classes + 1, class_names=tuple(names))


# ------------------ label split ------------------


def make_split(gt: GroundTruth, per_class: int, seed: int) -> LabelSplit:
    """Sample exactly `per_class` training pixels per class; the remaining labeled pixels test."""
    rng = np.random.default_rng(seed)
    flat = gt.labels.ravel()
    train_idx: List[np.ndarray] = []
    test_idx: List[np.ndarray] = []
    empty_test: List[int] = []
    for c in range(1, gt.n_classes + 1):
        members = np.flatnonzero(flat == c)
        if members.size < per_class:
            raise ClassTooSmallError(
                f"Class {c} ({gt.class_names[c - 1]}) has {members.size} labeled pixels, "
                f"{per_class} requested"
            )
        order = rng.permutation(members.size)
        train_idx.append(np.sort(members[order[:per_class]]))
        test_idx.append(np.sort(members[order[per_class:]]))
        if members.size == per_class:
            empty_test.append(c)
    if empty_test:
        logger.warning("Classes left without test pixels", extra={"classes": empty_test})

    def _coords(indices: Sequence[np.ndarray]) -> np.ndarray:
        flat_idx = np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64)
        rows, cols = np.unravel_index(flat_idx, gt.labels.shape)
        return np.stack([rows, cols, flat[flat_idx]], axis=-1)

    split = LabelSplit(
        train_coords=_coords(train_idx),
        test_coords=_coords(test_idx),
        seed=seed,
        per_class=per_class,
        empty_test_classes=tuple(empty_test),
    )
    logger.info(
        "Split labels",
        extra={"train": len(split.train_coords), "test": len(split.test_coords), "seed": seed},
    )
    return split
