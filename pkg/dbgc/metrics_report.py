"""Accuracy metrics over labeled test pixels and classification-map rendering."""

from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
from aws_lambda_powertools import Logger
from PIL import Image
from pydantic import BaseModel, Field
from sklearn.metrics import confusion_matrix

from common.errors import CorruptDataError, EmptyEvaluationError, PaletteMissingError, ShapeMismatchError
from dbgc.polsar_data import GroundTruth

logger = Logger(service="dbgc", child=True)

RGB = Tuple[int, int, int]

# index 0 is the unlabeled colour; 1..15 follow the benchmark class order
DEFAULT_PALETTE: Tuple[RGB, ...] = (
    (0, 0, 0),
    (0, 0, 255),
    (255, 0, 0),
    (0, 255, 0),
    (255, 255, 0),
    (255, 0, 255),
    (0, 139, 0),
    (160, 82, 45),
    (127, 255, 212),
    (255, 165, 0),
    (0, 255, 255),
    (128, 0, 128),
    (255, 192, 203),
    (128, 128, 128),
    (139, 69, 19),
    (90, 90, 255),
)


def class_palette(n_classes: int) -> Tuple[RGB, ...]:
    """DEFAULT_PALETTE extended with fixed pseudo-random colours up to class id `n_classes`."""
    if not 1 <= n_classes <= 255:
        raise ValueError(f"A uint8 class map holds 1..255 classes, got {n_classes}")
    extra = n_classes + 1 - len(DEFAULT_PALETTE)
    if extra <= 0:
        return DEFAULT_PALETTE
    colours = np.random.default_rng(len(DEFAULT_PALETTE)).integers(32, 256, size=(extra, 3))
    return DEFAULT_PALETTE + tuple(tuple(int(v) for v in row) for row in colours)


class Metrics(BaseModel):
    oa: float = Field(ge=0.0, le=1.0)
    aa: float = Field(ge=0.0, le=1.0)
    # None where the class has no evaluated pixels
    per_class: List[Optional[float]]
    confusion: List[List[int]]
    class_names: List[str]
    support: List[int]
    zero_support_classes: List[int] = Field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.per_class)

    @property
    def evaluated_pixels(self) -> int:
        return int(sum(self.support))


def metrics_from_confusion(confusion, class_names: Optional[Sequence[str]] = None) -> Metrics:
    """OA, AA and per-class accuracy from a C x C count matrix (rows true, columns predicted)."""
    matrix = np.asarray(confusion, dtype=np.int64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeMismatchError(f"Confusion matrix must be square, got {matrix.shape}")
    n_classes = matrix.shape[0]
    if class_names is None:
        class_names = [f"class_{i + 1}" for i in range(n_classes)]
    if len(class_names) != n_classes:
        raise ShapeMismatchError(f"{len(class_names)} class names for {n_classes} classes")

    total = int(matrix.sum())
    if total == 0:
        raise EmptyEvaluationError("No pixels to evaluate")
    support = matrix.sum(axis=1)
    diagonal = np.diag(matrix)

    per_class: List[Optional[float]] = []
    zero_support: List[int] = []
    for c in range(n_classes):
        if support[c] == 0:
            per_class.append(None)
            zero_support.append(c + 1)
        else:
            per_class.append(float(diagonal[c] / support[c]))
    if zero_support:
        logger.warning("Classes without test pixels are left out of AA", extra={"classes": zero_support})

    defined = [value for value in per_class if value is not None]
    return Metrics(
        oa=float(diagonal.sum() / total),
        aa=float(np.mean(defined)),
        per_class=per_class,
        confusion=matrix.tolist(),
        class_names=list(class_names),
        support=support.tolist(),
        zero_support_classes=zero_support,
    )


def evaluation_mask(gt: GroundTruth, exclude=None) -> np.ndarray:
    """Labeled pixels minus the excluded (row, col[, class]) coordinates."""
    mask = gt.labels > 0
    if exclude is not None:
        coords = np.asarray(exclude, dtype=np.int64)
        if coords.size:
            coords = coords.reshape(len(coords), -1)
            rows, cols = coords[:, 0], coords[:, 1]
            if (
                rows.min() < 0
                or cols.min() < 0
                or rows.max() >= gt.labels.shape[0]
                or cols.max() >= gt.labels.shape[1]
            ):
                raise ShapeMismatchError("Excluded coordinates fall outside the ground truth")
            mask[rows, cols] = False
    return mask


def evaluate(pred, gt: GroundTruth, exclude=None) -> Metrics:
    pred = np.asarray(pred)
    if pred.shape != gt.labels.shape:
        raise ShapeMismatchError(f"Prediction {pred.shape} does not match ground truth {gt.labels.shape}")
    mask = evaluation_mask(gt, exclude)
    if not mask.any():
        raise EmptyEvaluationError("No labeled pixels left after exclusion")

    y_true = gt.labels[mask].astype(np.int64)
    y_pred = pred[mask].astype(np.int64)
    labels = np.arange(1, gt.n_classes + 1)
    invalid = (y_pred < 1) | (y_pred > gt.n_classes)
    if invalid.any():
        raise CorruptDataError(
            f"Predictions outside 1..{gt.n_classes}: {sorted(set(y_pred[invalid].tolist()))[:5]}"
        )

    matrix = confusion_matrix(y_true, y_pred, labels=labels)
    metrics = metrics_from_confusion(matrix, gt.class_names)
    logger.info(
        "Evaluated prediction",
        extra={"pixels": int(mask.sum()), "oa": metrics.oa, "aa": metrics.aa},
    )
    return metrics


def render_map(pred, palette: Sequence[RGB] = DEFAULT_PALETTE) -> Image.Image:
    """Palette-mode image whose pixel indices are the class ids (0 = unlabeled)."""
    pred = np.asarray(pred)
    if pred.ndim != 2:
        raise ShapeMismatchError(f"Class map must be 2-D, got {pred.shape}")
    if len(palette) > 256:
        raise ValueError("A PNG palette holds at most 256 colours")
    present = np.unique(pred)
    missing = [int(c) for c in present if c < 0 or c >= len(palette)]
    if missing:
        raise PaletteMissingError(f"No palette colour for class ids {missing}")

    image = Image.fromarray(pred.astype(np.uint8), mode="P")
    flat = [channel for colour in palette for channel in colour]
    image.putpalette(flat)
    return image


def _cell(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def format_table(runs: Mapping[str, Metrics]) -> str:
    """Per-class accuracy rows followed by OA and AA, one column per run."""
    if not runs:
        raise ValueError("format_table needs at least one run")
    columns = list(runs)
    first = runs[columns[0]]
    for name in columns[1:]:
        if runs[name].n_classes != first.n_classes:
            raise ShapeMismatchError(f"Run {name} has a different number of classes")

    rows = [["Class", *columns]]
    for c, class_name in enumerate(first.class_names):
        rows.append([class_name, *(_cell(runs[name].per_class[c]) for name in columns)])
    rows.append(["OA", *(_cell(runs[name].oa) for name in columns)])
    rows.append(["AA", *(_cell(runs[name].aa) for name in columns)])

    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]

    def line(row):
        return " | ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()

    rule = "-+-".join("-" * width for width in widths)
    body = [line(rows[0]), rule]
    body.extend(line(row) for row in rows[1:-2])
    body.append(rule)
    body.extend(line(row) for row in rows[-2:])
    return "\n".join(body) + "\n"


def metrics_report(metrics: Metrics) -> dict:
    """JSON-ready report: {oa, aa, per_class, confusion} plus names and support."""
    return metrics.model_dump()
