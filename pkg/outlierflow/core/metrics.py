"""Dense OOD detection and outlier-aware segmentation metrics.

All detection metrics pool pixels over the whole dataset before ranking.
Anomalies are the positive class and higher scores mean more anomalous.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from scipy.stats import rankdata

from outlierflow.core.data_io import IGNORE_ID, Calibration, SplitData
from outlierflow.core.errors import ConfigurationError, DomainError
from outlierflow.core.scoring import fuse, score_image_batch, select_threshold

logger = logging.getLogger(__name__)

DEPTH_EDGES = np.arange(5.0, 55.0, 5.0)


def _binary_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ConfigurationError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise DomainError("Labels must be 0 (inlier) or 1 (anomaly)")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise DomainError("Need at least one positive and one negative")
    return scores, labels.astype(bool)


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve; tied scores form one threshold."""
    scores, labels = _binary_inputs(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    # last index of every run of equal scores
    cut = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tp, fp = tp[cut], fp[cut]
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic with midranks for ties."""
    scores, labels = _binary_inputs(scores, labels)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def fpr_at_tpr(scores_pos, scores_neg, tpr: float = 0.95) -> float:
    """Fraction of inlier scores strictly above the threshold that keeps ``tpr`` of anomalies."""
    scores_neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if scores_neg.size == 0:
        raise DomainError("No inlier scores")
    threshold = select_threshold(scores_pos, tpr)
    return float(np.mean(scores_neg > threshold))


@dataclass
class ConfusionK1:
    """(K+1) x (K+1) confusion counts; rows are ground truth, columns predictions, id K is the outlier."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.int64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1] or self.matrix.shape[0] < 2:
            raise ConfigurationError(f"Confusion must be square with at least 2 rows, got {self.matrix.shape}")
        if (self.matrix < 0).any():
            raise ConfigurationError("Confusion counts must be non-negative")

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionK1":
        return cls(np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64))

    @classmethod
    def from_arrays(cls, labels, predictions, num_classes: int) -> "ConfusionK1":
        confusion = cls.empty(num_classes)
        confusion.update(labels, predictions)
        return confusion

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0] - 1

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def update(self, labels, predictions) -> None:
        labels = np.asarray(labels).ravel().astype(np.int64)
        predictions = np.asarray(predictions).ravel().astype(np.int64)
        if labels.shape != predictions.shape:
            raise ConfigurationError("Label and prediction shapes differ")
        keep = labels != IGNORE_ID
        labels, predictions = labels[keep], predictions[keep]
        size = self.matrix.shape[0]
        if labels.size and (labels.max() >= size or predictions.max() >= size or predictions.min() < 0):
            raise DomainError(f"Ids outside 0..{size - 1}")
        self.matrix += np.bincount(labels * size + predictions, minlength=size * size).reshape(size, size)

    def merge(self, other: "ConfusionK1") -> "ConfusionK1":
        if other.matrix.shape != self.matrix.shape:
            raise ConfigurationError("Cannot merge confusions of different sizes")
        return ConfusionK1(self.matrix + other.matrix)


def _iou_per_class(matrix: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    ious = np.full(len(classes), np.nan)
    for i, k in enumerate(classes):
        tp = matrix[k, k]
        union = matrix[k, :].sum() + matrix[:, k].sum() - tp
        if union > 0:
            ious[i] = tp / union
    return ious


def _mean_defined(ious: np.ndarray, what: str) -> float:
    missing = int(np.isnan(ious).sum())
    if missing == ious.size:
        raise DomainError(f"{what}: no class has a non-empty union")
    if missing:
        logger.warning("%s: %d class(es) with empty union excluded from the mean", what, missing)
    return float(np.nanmean(ious))


def miou(confusion) -> float:
    """Closed-set mean IoU of a K x K confusion (or of the inlier block of a ConfusionK1)."""
    matrix = confusion.matrix[:-1, :-1] if isinstance(confusion, ConfusionK1) else np.asarray(confusion)
    return _mean_defined(_iou_per_class(matrix, range(matrix.shape[0])), "mIoU")


def open_miou(confusion: ConfusionK1) -> float:
    """Mean IoU over the K inlier classes of the (K+1)-way confusion.

    Outliers predicted as class k count as false positives of k, inliers
    predicted as outlier count as false negatives; correctly detected
    outliers count nowhere.
    """
    return _mean_defined(_iou_per_class(confusion.matrix, range(confusion.num_classes)), "open-mIoU")


@dataclass
class DepthBins:
    edges: np.ndarray
    counts: np.ndarray
    false_positives: np.ndarray
    calibration: Calibration

    @property
    def fpr(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.false_positives / np.maximum(self.counts, 1), np.nan)

    def rows(self) -> List[List]:
        """One row per bin; empty bins carry None instead of a rate."""
        return [
            [f"{lo:g}-{hi:g}", int(n), float(r) if n > 0 else None]
            for lo, hi, n, r in zip(self.edges[:-1], self.edges[1:], self.counts, self.fpr)
        ]


def depth_binned_fpr(
    score_maps: Sequence[np.ndarray],
    label_maps: Sequence[np.ndarray],
    disparity_maps: Sequence[np.ndarray],
    calibration: Optional[Calibration],
    threshold: float,
    outlier_id: int,
    edges: np.ndarray = DEPTH_EDGES,
) -> DepthBins:
    """False-positive rate of inlier pixels per depth range at one global threshold.

    Depth is focal * baseline / disparity; pixels with nonpositive disparity or
    outside [edges[0], edges[-1]] are skipped. The last bin is closed.
    """
    if calibration is None:
        raise ConfigurationError("Depth binning needs stereo calibration")
    edges = np.asarray(edges, dtype=np.float64)
    n_bins = edges.size - 1
    counts = np.zeros(n_bins, dtype=np.int64)
    false_positives = np.zeros(n_bins, dtype=np.int64)
    for scores, labels, disparity in zip(score_maps, label_maps, disparity_maps):
        scores, labels, disparity = np.asarray(scores), np.asarray(labels), np.asarray(disparity)
        if not scores.shape == labels.shape == disparity.shape:
            raise ConfigurationError("Score, label and disparity maps must share a shape")
        depth = calibration.depth(disparity)
        keep = (labels < outlier_id) & (disparity > 0) & (depth >= edges[0]) & (depth <= edges[-1])
        bins = np.minimum(np.searchsorted(edges, depth[keep], side="right") - 1, n_bins - 1)
        counts += np.bincount(bins, minlength=n_bins)
        hits = (scores[keep] > threshold).astype(np.float64)
        false_positives += np.bincount(bins, weights=hits, minlength=n_bins).astype(np.int64)
    return DepthBins(edges, counts, false_positives, calibration)


@dataclass
class SeparationHistogram:
    edges: np.ndarray
    known: np.ndarray
    unknown: np.ndarray
    auroc: float


def separation_histogram(maxlogit_known, maxlogit_unknown, bins: int = 50) -> SeparationHistogram:
    """Aligned histograms of max-logit for known and unknown pixels.

    AUROC treats low max-logit as the anomaly signal.
    """
    known = np.asarray(maxlogit_known, dtype=np.float64).ravel()
    unknown = np.asarray(maxlogit_unknown, dtype=np.float64).ravel()
    if known.size == 0 or unknown.size == 0:
        raise DomainError("Both known and unknown max-logits are required")
    edges = np.histogram_bin_edges(np.concatenate([known, unknown]), bins=bins)
    known_counts, _ = np.histogram(known, bins=edges)
    unknown_counts, _ = np.histogram(unknown, bins=edges)
    labels = np.r_[np.zeros(known.size), np.ones(unknown.size)]
    value = auroc(-np.r_[known, unknown], labels)
    return SeparationHistogram(edges, known_counts, unknown_counts, value)


@dataclass
class EvalResult:
    ap: float
    auroc: float
    fpr95: float
    miou: float
    open_miou: float
    n_positive: int
    n_negative: int
    threshold: float
    depth: Optional[DepthBins] = None
    extra: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = {
            "ap": self.ap,
            "auroc": self.auroc,
            "fpr95": self.fpr95,
            "miou": self.miou,
            "open_miou": self.open_miou,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "threshold": self.threshold,
            **self.extra,
        }
        if self.depth is not None:
            data["depth_fpr"] = {row[0]: {"pixels": row[1], "fpr": row[2]} for row in self.depth.rows()}
        return data


class EvalAccumulator:
    """Pixel-pooled evaluation state.

    Holds per-pixel scores, ground truth and closed-set predictions of every
    added image (ignore pixels dropped); partial accumulators merge by
    concatenation.
    """

    def __init__(self, num_classes: int, tpr: float = 0.95, calibration: Optional[Calibration] = None):
        self.num_classes = num_classes
        self.tpr = tpr
        self.calibration = calibration
        self._scores: List[np.ndarray] = []
        self._labels: List[np.ndarray] = []
        self._predictions: List[np.ndarray] = []
        self._maps: List[tuple] = []

    def add(self, scores, labels, predictions, disparity=None) -> None:
        scores = np.asarray(scores, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        predictions = np.asarray(predictions, dtype=np.int64)
        if not scores.shape == labels.shape == predictions.shape:
            raise ConfigurationError("Score, label and prediction maps must share a shape")
        keep = labels != IGNORE_ID
        self._scores.append(scores[keep])
        self._labels.append(labels[keep])
        self._predictions.append(predictions[keep])
        if disparity is not None:
            self._maps.append((scores, labels, np.asarray(disparity)))

    def merge(self, other: "EvalAccumulator") -> "EvalAccumulator":
        if other.num_classes != self.num_classes:
            raise ConfigurationError("Cannot merge accumulators with different class counts")
        merged = EvalAccumulator(self.num_classes, self.tpr, self.calibration or other.calibration)
        for source in (self, other):
            merged._scores += source._scores
            merged._labels += source._labels
            merged._predictions += source._predictions
            merged._maps += source._maps
        return merged

    @property
    def n_pixels(self) -> int:
        return int(sum(s.size for s in self._scores))

    def pooled(self) -> Tuple[np.ndarray, np.ndarray]:
        """(scores, labels) of every accumulated non-ignore pixel."""
        if not self._scores:
            raise DomainError("Nothing accumulated")
        return np.concatenate(self._scores), np.concatenate(self._labels)

    def result(self) -> EvalResult:
        scores, labels = self.pooled()
        predictions = np.concatenate(self._predictions)
        outlier = labels == self.num_classes
        pos, neg = scores[outlier], scores[~outlier]
        if pos.size == 0 or neg.size == 0:
            raise DomainError("Evaluation needs both anomaly and inlier pixels")

        binary = outlier.astype(np.int64)
        threshold = select_threshold(pos, self.tpr)
        fused = fuse(predictions, scores, threshold, self.num_classes).labels
        closed = ConfusionK1.from_arrays(labels[~outlier], predictions[~outlier], self.num_classes)
        open_confusion = ConfusionK1.from_arrays(labels, fused, self.num_classes)

        depth = None
        if self._maps and self.calibration is not None:
            depth = depth_binned_fpr(
                [m[0] for m in self._maps],
                [m[1] for m in self._maps],
                [m[2] for m in self._maps],
                self.calibration,
                threshold,
                self.num_classes,
            )
        return EvalResult(
            ap=average_precision(scores, binary),
            auroc=auroc(scores, binary),
            fpr95=float(np.mean(neg > threshold)),
            miou=miou(closed),
            open_miou=open_miou(open_confusion),
            n_positive=int(pos.size),
            n_negative=int(neg.size),
            threshold=threshold,
            depth=depth,
        )


def evaluate_arrays(
    scores,
    labels,
    predictions,
    num_classes: int,
    tpr: float = 0.95,
    disparity=None,
    calibration: Optional[Calibration] = None,
) -> EvalResult:
    """One-shot evaluation of stacked (N, H, W) maps."""
    accumulator = EvalAccumulator(num_classes, tpr, calibration)
    scores, labels, predictions = np.asarray(scores), np.asarray(labels), np.asarray(predictions)
    if scores.ndim == 2:
        scores, labels, predictions = scores[None], labels[None], predictions[None]
        disparity = None if disparity is None else np.asarray(disparity)[None]
    for i in range(scores.shape[0]):
        accumulator.add(scores[i], labels[i], predictions[i], None if disparity is None else disparity[i])
    return accumulator.result()


@torch.no_grad()
def evaluate_classifier(
    model: nn.Module,
    data: SplitData,
    num_classes: int,
    kind: str = "jsd",
    temperature: float = 1.0,
    tpr: float = 0.95,
    calibration: Optional[Calibration] = None,
    batch_size: int = 16,
) -> EvalResult:
    """Score a labeled split with ``model`` and evaluate pixel-pooled."""
    accumulator = EvalAccumulator(num_classes, tpr, calibration)
    for start in range(0, len(data), batch_size):
        scored = score_image_batch(model, data.images[start : start + batch_size], kind, temperature)
        for i in range(scored.scores.shape[0]):
            j = start + i
            disparity = data.disparity[j] if data.disparity is not None else None
            accumulator.add(scored.scores[i], data.labels[j].numpy(), scored.predictions[i], disparity)
    return accumulator.result()
