import json

import numpy as np
import pytest
from sklearn.metrics import average_precision_score, roc_auc_score

from outlierflow.core.classifier import SegmentationNet
from outlierflow.core.data_io import IGNORE_ID, Calibration, write_json
from outlierflow.core.errors import ConfigurationError, DomainError
from outlierflow.core.metrics import (
    ConfusionK1,
    EvalAccumulator,
    auroc,
    average_precision,
    depth_binned_fpr,
    evaluate_arrays,
    evaluate_classifier,
    fpr_at_tpr,
    miou,
    open_miou,
    separation_histogram,
)


def test_average_precision_example():
    assert average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(5 / 6)


def test_detection_metrics_match_sklearn_with_ties():
    rng = np.random.default_rng(4)
    scores = rng.integers(0, 12, size=400).astype(np.float64)
    labels = (rng.random(400) < 0.3 + 0.04 * scores).astype(int)
    assert average_precision(scores, labels) == pytest.approx(average_precision_score(labels, scores))
    assert auroc(scores, labels) == pytest.approx(roc_auc_score(labels, scores))


def test_auroc_extremes():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0
    assert auroc([0.5] * 4, [0, 1, 0, 1]) == pytest.approx(0.5)


def test_binary_inputs_validated():
    with pytest.raises(DomainError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(DomainError):
        average_precision([0.1, 0.2], [0, 2])
    with pytest.raises(ConfigurationError):
        auroc([0.1, 0.2, 0.3], [0, 1])


def test_fpr_at_tpr():
    scores = np.arange(1, 101, dtype=np.float64)
    assert fpr_at_tpr(scores, scores, 0.95) == pytest.approx(0.95)
    assert fpr_at_tpr([5.0, 6.0], [1.0, 2.0], 0.95) == 0.0
    with pytest.raises(DomainError):
        fpr_at_tpr([1.0], [], 0.95)


def test_confusion_ignores_void_pixels():
    labels = np.array([0, 0, 1, 1, IGNORE_ID])
    predictions = np.array([0, 1, 1, 1, 0])
    confusion = ConfusionK1.from_arrays(labels, predictions, num_classes=2)
    assert confusion.total == 4
    assert confusion.matrix.shape == (3, 3)
    assert miou(confusion) == pytest.approx((1 / 2 + 2 / 3) / 2)


def test_confusion_merge_and_errors():
    a = ConfusionK1.from_arrays([0, 1], [0, 1], 2)
    b = ConfusionK1.from_arrays([2], [0], 2)
    assert a.merge(b).total == 3
    with pytest.raises(ConfigurationError):
        a.merge(ConfusionK1.empty(3))
    with pytest.raises(DomainError):
        a.update([5], [0])
    with pytest.raises(ConfigurationError):
        ConfusionK1(np.array([[-1, 0], [0, 0]]))


def test_open_miou_counts_outlier_errors_against_inliers():
    # An outlier predicted as class 0 is a false positive of class 0.
    confusion = ConfusionK1.from_arrays([0, 1, 2, 2], [0, 1, 0, 2], 2)
    assert open_miou(confusion) == pytest.approx((0.5 + 1.0) / 2)
    # An inlier flagged as outlier is a false negative of its class.
    confusion = ConfusionK1.from_arrays([0, 0, 1], [0, 2, 1], 2)
    assert open_miou(confusion) == pytest.approx((0.5 + 1.0) / 2)


def test_miou_needs_a_defined_class():
    with pytest.raises(DomainError):
        miou(ConfusionK1.empty(2))


def test_depth_binned_fpr():
    calibration = Calibration(focal_px=100.0, baseline_m=0.5)  # depth = 50 / disparity
    disparity = np.array([[5.0, 5.0, 1.0, 0.0, 20.0, 2.0]])
    scores = np.array([[0.9, 0.1, 0.9, 0.9, 0.9, 0.9]])
    labels = np.array([[0, 1, 0, 0, 0, 2]])
    bins = depth_binned_fpr([scores], [labels], [disparity], calibration, 0.5, outlier_id=2)
    assert bins.counts.tolist() == [0, 2, 0, 0, 0, 0, 0, 0, 1]
    assert bins.fpr[1] == pytest.approx(0.5)
    # 50 m sits on the closed upper edge of the last bin.
    assert bins.fpr[-1] == pytest.approx(1.0)
    assert np.isnan(bins.fpr[0])
    assert bins.rows()[1][:2] == ["10-15", 2]
    assert bins.rows()[0] == ["5-10", 0, None]


def test_depth_binning_needs_calibration():
    with pytest.raises(ConfigurationError):
        depth_binned_fpr([np.zeros((1, 1))], [np.zeros((1, 1))], [np.ones((1, 1))], None, 0.0, 2)


def test_separation_histogram():
    hist = separation_histogram([5.0, 6.0, 7.0], [1.0, 2.0], bins=4)
    assert hist.auroc == 1.0
    assert hist.known.sum() == 3
    assert hist.unknown.sum() == 2
    assert hist.edges.size == 5
    with pytest.raises(DomainError):
        separation_histogram([], [1.0])


def _synthetic_maps(rng, n=3, size=8, num_classes=2):
    labels = rng.integers(0, num_classes + 1, size=(n, size, size))
    labels[:, 0, 0] = IGNORE_ID
    labels[:, 1, 1] = num_classes
    labels[:, 2, 2] = 0
    scores = rng.random((n, size, size)) + (labels == num_classes)
    predictions = np.where(labels == num_classes, 0, labels) % num_classes
    return scores.astype(np.float32), labels, predictions


def test_accumulator_pools_pixels_across_images():
    rng = np.random.default_rng(2)
    scores, labels, predictions = _synthetic_maps(rng)
    result = evaluate_arrays(scores, labels, predictions, num_classes=2)

    keep = labels != IGNORE_ID
    binary = (labels[keep] == 2).astype(int)
    assert result.ap == pytest.approx(average_precision_score(binary, scores[keep]), rel=1e-6)
    assert result.auroc == pytest.approx(roc_auc_score(binary, scores[keep]), rel=1e-6)
    assert result.n_positive == int(binary.sum())
    assert result.n_negative == int(keep.sum() - binary.sum())
    assert result.miou == pytest.approx(1.0)


def test_accumulator_merge_equals_single_pass():
    rng = np.random.default_rng(3)
    scores, labels, predictions = _synthetic_maps(rng, n=4)
    whole = EvalAccumulator(2)
    left, right = EvalAccumulator(2), EvalAccumulator(2)
    for i in range(4):
        whole.add(scores[i], labels[i], predictions[i])
        (left if i < 2 else right).add(scores[i], labels[i], predictions[i])
    merged = left.merge(right)
    assert merged.n_pixels == whole.n_pixels
    assert merged.result().to_dict() == pytest.approx(whole.result().to_dict())


def test_perfect_detector():
    labels = np.array([[0, 1, 2, 2]])
    scores = np.array([[0.0, 0.1, 0.9, 1.0]])
    predictions = np.array([[0, 1, 0, 1]])
    result = evaluate_arrays(scores, labels, predictions, num_classes=2)
    assert result.ap == 1.0
    assert result.auroc == 1.0
    assert result.fpr95 == 0.0
    assert result.open_miou == 1.0


def test_accumulator_errors():
    accumulator = EvalAccumulator(2)
    with pytest.raises(DomainError):
        accumulator.pooled()
    accumulator.add(np.zeros((2, 2)), np.zeros((2, 2), dtype=int), np.zeros((2, 2), dtype=int))
    with pytest.raises(DomainError):
        accumulator.result()
    with pytest.raises(ConfigurationError):
        accumulator.add(np.zeros((2, 2)), np.zeros((2, 3), dtype=int), np.zeros((2, 2), dtype=int))


def test_depth_rows_in_result(tmp_path):
    calibration = Calibration(focal_px=100.0, baseline_m=0.5)
    labels = np.array([[0, 1, 2, 2]])
    scores = np.array([[0.0, 0.1, 0.9, 1.0]])
    disparity = np.full((1, 4), 5.0)
    result = evaluate_arrays(scores, labels, np.array([[0, 1, 0, 1]]), 2, disparity=disparity,
                             calibration=calibration)
    assert result.depth is not None
    assert result.to_dict()["depth_fpr"]["10-15"]["pixels"] == 2
    assert result.to_dict()["depth_fpr"]["45-50"] == {"pixels": 0, "fpr": None}
    path = write_json(result.to_dict(), tmp_path / "eval.json")
    assert json.loads(path.read_text(encoding="utf-8"))["depth_fpr"]["45-50"]["fpr"] is None


def test_evaluate_classifier_on_split(test_split):
    model = SegmentationNet(3, 3, 4)
    result = evaluate_classifier(model, test_split, 3, "jsd", 2.0, batch_size=1)
    for value in (result.ap, result.auroc, result.fpr95, result.miou, result.open_miou):
        assert 0.0 <= value <= 1.0
    assert result.n_positive > 0


def _pairwise_auroc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def _threshold_ap(scores, labels):
    total, n_pos = 0.0, labels.sum()
    for t in np.unique(scores)[::-1]:
        above = scores >= t
        total += (labels[scores == t].sum() / n_pos) * (labels[above].sum() / above.sum())
    return total


def _direct_fpr(scores_pos, scores_neg, tpr):
    need = int(np.ceil(tpr * scores_pos.size - 1e-9))
    feasible = [t for t in np.unique(scores_pos) if (scores_pos > t).sum() >= need]
    threshold = max(feasible) if feasible else np.nextafter(scores_pos.min(), -np.inf)
    return float((scores_neg > threshold).mean())


def test_detection_metrics_match_direct_definitions():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 500:
        n = int(rng.integers(4, 40))
        scores = rng.integers(0, 8, size=n).astype(np.float64)
        labels = (rng.random(n) < 0.4).astype(int)
        if labels.min() == labels.max():
            continue
        assert auroc(scores, labels) == pytest.approx(_pairwise_auroc(scores, labels), abs=1e-9)
        assert average_precision(scores, labels) == pytest.approx(_threshold_ap(scores, labels), abs=1e-9)
        pos, neg = scores[labels == 1], scores[labels == 0]
        assert fpr_at_tpr(pos, neg, 0.95) == pytest.approx(_direct_fpr(pos, neg, 0.95), abs=1e-9)
        checked += 1


def test_auroc_rank_properties():
    rng = np.random.default_rng(12)
    scores = rng.integers(0, 10, size=300).astype(np.float64)
    labels = (rng.random(300) < 0.5).astype(int)
    value = auroc(scores, labels)
    assert auroc(np.exp(scores / 3.0) - 7.0, labels) == pytest.approx(value, abs=1e-12)
    assert auroc(scores, 1 - labels) == pytest.approx(1.0 - value, abs=1e-12)


def test_open_miou_equals_closed_miou_under_ideal_detection():
    rng = np.random.default_rng(13)
    num_classes = 4
    labels = rng.integers(0, num_classes + 1, size=2000)
    closed = np.where(rng.random(2000) < 0.7, labels, rng.integers(0, num_classes, size=2000)) % num_classes
    ideal = np.where(labels == num_classes, num_classes, closed)
    inlier = labels < num_classes
    open_confusion = ConfusionK1.from_arrays(labels, ideal, num_classes)
    closed_confusion = ConfusionK1.from_arrays(labels[inlier], closed[inlier], num_classes)
    assert open_miou(open_confusion) == pytest.approx(miou(closed_confusion), abs=1e-12)
