import io

import numpy as np
import pytest
from PIL import Image

from common.errors import CorruptDataError, EmptyEvaluationError, PaletteMissingError, ShapeMismatchError
from dbgc.metrics_report import (
    DEFAULT_PALETTE,
    class_palette,
    evaluate,
    evaluation_mask,
    format_table,
    metrics_from_confusion,
    metrics_report,
    render_map,
)
from dbgc.polsar_data import FLEVOLAND_CLASS_NAMES, GroundTruth

DBGC_ACCURACIES = (
    0.9875, 0.9863, 1.0000, 0.9984, 0.9721, 0.9930, 0.9636, 0.9647,
    0.9711, 0.9926, 0.9651, 0.9888, 0.9435, 0.9825, 0.9905,
)
GNN_ACCURACIES = (
    0.9456, 0.9744, 0.9851, 0.9428, 0.8610, 0.9811, 0.9807, 0.6562,
    0.3690, 0.9871, 0.9807, 0.9616, 0.3355, 0.8760, 0.9943,
)


def confusion_with_accuracies(accuracies, support=10000):
    """Diagonal hits per class with the misses all assigned to the next class."""
    n = len(accuracies)
    matrix = np.zeros((n, n), dtype=np.int64)
    for c, accuracy in enumerate(accuracies):
        hits = int(round(accuracy * support))
        matrix[c, c] = hits
        matrix[c, (c + 1) % n] += support - hits
    return matrix


@pytest.fixture
def ground_truth():
    labels = np.array([[1, 1, 2], [2, 0, 3]])
    return GroundTruth(labels=labels, class_names=("a", "b", "c"))


def test_perfect_prediction(ground_truth):
    pred = np.where(ground_truth.labels == 0, 1, ground_truth.labels)
    metrics = evaluate(pred, ground_truth)
    assert metrics.oa == 1.0
    assert metrics.aa == 1.0
    assert metrics.per_class == [1.0, 1.0, 1.0]
    assert metrics.evaluated_pixels == 5


def test_constant_prediction_on_two_balanced_classes():
    gt = GroundTruth(labels=np.array([[1, 1], [2, 2]]), class_names=("a", "b"))
    metrics = evaluate(np.ones((2, 2), dtype=np.int64), gt)
    assert metrics.oa == 0.5
    assert metrics.aa == 0.5
    assert metrics.confusion == [[2, 0], [2, 0]]


@pytest.mark.parametrize(
    "accuracies,expected_aa", [(DBGC_ACCURACIES, 0.9800), (GNN_ACCURACIES, 0.8554)]
)
def test_benchmark_columns_average_to_reported_aa(accuracies, expected_aa):
    metrics = metrics_from_confusion(confusion_with_accuracies(accuracies), FLEVOLAND_CLASS_NAMES)
    np.testing.assert_allclose(metrics.per_class, accuracies, atol=1e-12)
    assert abs(metrics.aa - expected_aa) <= 1e-4
    # equal support makes OA the same average
    assert abs(metrics.oa - metrics.aa) <= 1e-12


def test_zero_support_class_is_left_out_of_aa():
    confusion = [[3, 1, 0], [0, 0, 0], [0, 0, 2]]
    metrics = metrics_from_confusion(confusion)
    assert metrics.per_class == [0.75, None, 1.0]
    assert metrics.zero_support_classes == [2]
    assert metrics.aa == pytest.approx(0.875)
    assert metrics.oa == pytest.approx(5 / 6)


def test_empty_confusion_raises():
    with pytest.raises(EmptyEvaluationError):
        metrics_from_confusion(np.zeros((3, 3), dtype=np.int64))


def test_non_square_confusion_raises():
    with pytest.raises(ShapeMismatchError):
        metrics_from_confusion(np.ones((2, 3), dtype=np.int64))


def test_excluding_every_labeled_pixel_raises(ground_truth):
    train = np.argwhere(ground_truth.labels > 0)
    with pytest.raises(EmptyEvaluationError):
        evaluate(np.ones((2, 3), dtype=np.int64), ground_truth, exclude=train)


def test_excluded_pixels_are_not_counted(ground_truth):
    pred = np.array([[1, 2, 2], [2, 1, 3]])
    exclude = np.array([[0, 1, 1]])
    mask = evaluation_mask(ground_truth, exclude)
    assert mask.sum() == 4
    metrics = evaluate(pred, ground_truth, exclude=exclude)
    assert metrics.oa == 1.0
    assert metrics.support == [1, 2, 1]


def test_confusion_total_matches_evaluated_pixels():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, size=(20, 20))
    labels[0, :5] = np.arange(5)
    gt = GroundTruth(labels=labels, class_names=tuple("abcd"))
    metrics = evaluate(rng.integers(1, 5, size=(20, 20)), gt)
    assert int(np.sum(metrics.confusion)) == int((labels > 0).sum())
    assert metrics.aa == pytest.approx(np.mean(metrics.per_class))


def test_class_permutation_leaves_scores_unchanged():
    rng = np.random.default_rng(1)
    confusion = rng.integers(0, 50, size=(6, 6))
    permutation = rng.permutation(6)
    original = metrics_from_confusion(confusion)
    permuted = metrics_from_confusion(confusion[np.ix_(permutation, permutation)])
    assert permuted.oa == pytest.approx(original.oa, abs=1e-12)
    assert permuted.aa == pytest.approx(original.aa, abs=1e-12)


def test_equal_support_makes_oa_and_aa_agree():
    rng = np.random.default_rng(2)
    confusion = np.zeros((4, 4), dtype=np.int64)
    for c in range(4):
        confusion[c] = rng.multinomial(100, np.full(4, 0.25))
    metrics = metrics_from_confusion(confusion)
    assert abs(metrics.oa - metrics.aa) <= 1e-12


@pytest.mark.parametrize("bad", [0, 4])
def test_predictions_outside_class_range_are_corrupt(ground_truth, bad):
    pred = np.ones((2, 3), dtype=np.int64)
    pred[0, 0] = bad
    with pytest.raises(CorruptDataError):
        evaluate(pred, ground_truth)


def test_prediction_shape_mismatch(ground_truth):
    with pytest.raises(ShapeMismatchError):
        evaluate(np.ones((3, 3), dtype=np.int64), ground_truth)


def test_report_carries_the_confusion_matrix(ground_truth):
    report = metrics_report(evaluate(np.ones((2, 3), dtype=np.int64), ground_truth))
    assert set(report) >= {"oa", "aa", "per_class", "confusion"}
    assert report["confusion"] == [[2, 0, 0], [2, 0, 0], [1, 0, 0]]


# ------------------ rendering ------------------


def test_single_class_map_renders_one_colour():
    image = render_map(np.full((4, 5), 3)).convert("RGB")
    colours = {tuple(pixel) for pixel in np.asarray(image).reshape(-1, 3)}
    assert colours == {DEFAULT_PALETTE[3]}


def test_unlabeled_pixels_render_with_palette_zero():
    image = render_map(np.array([[0, 1]])).convert("RGB")
    assert tuple(np.asarray(image)[0, 0]) == DEFAULT_PALETTE[0]


def test_missing_palette_entry():
    with pytest.raises(PaletteMissingError) as error:
        render_map(np.array([[1, 2]]), palette=[(0, 0, 0), (1, 1, 1)])
    assert "2" in str(error.value)


def test_png_keeps_class_indices():
    pred = np.random.default_rng(0).integers(0, 16, size=(7, 9))
    buffer = io.BytesIO()
    render_map(pred).save(buffer, format="PNG")
    buffer.seek(0)
    reloaded = Image.open(buffer)
    assert reloaded.mode == "P"
    np.testing.assert_array_equal(np.asarray(reloaded), pred)


@pytest.mark.parametrize("n_classes", [1, 15])
def test_benchmark_class_counts_use_the_default_palette(n_classes):
    assert class_palette(n_classes) == DEFAULT_PALETTE


def test_palette_extends_to_every_class_id():
    palette = class_palette(40)
    assert len(palette) == 41
    assert palette[: len(DEFAULT_PALETTE)] == DEFAULT_PALETTE
    assert palette == class_palette(40)
    pred = np.arange(41).reshape(1, 41)
    buffer = io.BytesIO()
    render_map(pred, palette).save(buffer, format="PNG")
    buffer.seek(0)
    np.testing.assert_array_equal(np.asarray(Image.open(buffer)), pred)


@pytest.mark.parametrize("n_classes", [0, 256])
def test_palette_class_count_bounds(n_classes):
    with pytest.raises(ValueError):
        class_palette(n_classes)


# ------------------ table ------------------


def test_table_layout():
    gnn = metrics_from_confusion([[3, 1], [0, 4]], ["Water", "Forest"])
    dbgc = metrics_from_confusion([[4, 0], [0, 4]], ["Water", "Forest"])
    lines = format_table({"GNN": gnn, "DB-GC": dbgc}).splitlines()

    assert [cell.strip() for cell in lines[0].split("|")] == ["Class", "GNN", "DB-GC"]
    assert [cell.strip() for cell in lines[2].split("|")] == ["Water", "0.7500", "1.0000"]
    assert [cell.strip() for cell in lines[3].split("|")] == ["Forest", "1.0000", "1.0000"]
    assert [cell.strip() for cell in lines[5].split("|")] == ["OA", "0.8750", "1.0000"]
    assert [cell.strip() for cell in lines[6].split("|")] == ["AA", "0.8750", "1.0000"]
    assert set(lines[1]) <= {"-", "+"}


def test_table_marks_zero_support_cells():
    metrics = metrics_from_confusion([[1, 0], [0, 0]])
    table = format_table({"run": metrics})
    assert [cell.strip() for cell in table.splitlines()[3].split("|")] == ["class_2", "-"]


def test_table_rejects_mismatched_runs():
    with pytest.raises(ShapeMismatchError):
        format_table({"a": metrics_from_confusion([[1]]), "b": metrics_from_confusion([[1, 0], [0, 1]])})
