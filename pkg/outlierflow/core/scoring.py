"""Dense anomaly scores, threshold selection and outlier-aware fusion."""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from outlierflow.core.classifier import predict_argmax
from outlierflow.core.divergences import divergence_from_logits
from outlierflow.core.errors import ConfigurationError, DomainError


class OODScoreKind(str, Enum):
    """Anomaly score families. Every kind is oriented so that higher means more anomalous."""

    JSD = "jsd"
    MSP = "msp"
    MAXLOGIT = "maxlogit"
    KL = "kl"
    RKL = "rkl"


def _class_dim(logits: torch.Tensor) -> int:
    if logits.dim() == 3:
        return 0
    if logits.dim() in (2, 4):
        return 1
    raise ConfigurationError(f"Cannot score logits of shape {tuple(logits.shape)}")


def score_map(logits: torch.Tensor, kind: Union[str, OODScoreKind] = OODScoreKind.JSD,
              temperature: float = 1.0) -> torch.Tensor:
    """Per-location anomaly score for (K, H, W), (N, K, H, W) or (N, K) logits.

    Divergence kinds return -D(U, softmax(l / T)): a uniform prediction
    scores 0, the maximum, so JSD scores lie in [-ln 2, 0]. MSP returns
    1 - max softmax(l / T) and MaxLogit returns -max l (temperature is ignored).
    """
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    try:
        kind = OODScoreKind(kind)
    except ValueError as e:
        raise ConfigurationError(f"Unknown score kind {kind!r}") from e
    dim = _class_dim(logits)
    if kind is OODScoreKind.MSP:
        return 1.0 - F.softmax(logits / temperature, dim=dim).max(dim=dim).values
    if kind is OODScoreKind.MAXLOGIT:
        return -logits.max(dim=dim).values
    return -divergence_from_logits(kind.value, logits, dim=dim, temperature=temperature)


def select_threshold(anomaly_scores: Union[np.ndarray, Sequence[float]], tpr: float = 0.95) -> float:
    """Largest delta such that at least ``tpr`` of the anomaly scores are strictly above it.

    When even the smallest score cannot be excluded, delta is the next float
    below the minimum so that every anomaly counts as detected.
    """
    scores = np.asarray(anomaly_scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise DomainError("Cannot select a threshold from an empty score list")
    if not 0 < tpr <= 1:
        raise ConfigurationError("tpr must lie in (0, 1]")
    n = scores.size
    # At most this many anomalies may sit at or below delta.
    allowed = n - math.ceil(tpr * n - 1e-9)
    values, counts = np.unique(scores, return_counts=True)
    at_or_below = np.cumsum(counts)
    feasible = np.nonzero(at_or_below <= allowed)[0]
    if feasible.size == 0:
        return float(np.nextafter(values[0], -np.inf))
    return float(values[feasible[-1]])


@dataclass
class FusedPrediction:
    labels: np.ndarray
    threshold: float
    outlier_id: int


def fuse(closed_set: np.ndarray, scores: np.ndarray, threshold: float, num_classes: int) -> FusedPrediction:
    """Override the closed-set prediction with the outlier id wherever score > threshold."""
    closed_set = np.asarray(closed_set)
    scores = np.asarray(scores)
    if closed_set.shape != scores.shape:
        raise ConfigurationError(f"Prediction shape {closed_set.shape} != score shape {scores.shape}")
    labels = np.where(scores > threshold, num_classes, closed_set).astype(np.int64)
    return FusedPrediction(labels, float(threshold), num_classes)


@dataclass
class ScoredBatch:
    logits: torch.Tensor
    predictions: np.ndarray  # (N, H, W) closed-set ids
    scores: np.ndarray  # (N, H, W) float32
    fused: Optional[FusedPrediction] = None


@torch.no_grad()
def score_image_batch(
    model: nn.Module,
    images: torch.Tensor,
    kind: Union[str, OODScoreKind] = OODScoreKind.JSD,
    temperature: float = 1.0,
    threshold: Optional[float] = None,
) -> ScoredBatch:
    """Closed-set prediction, anomaly scores and (given a threshold) fused labels for a batch."""
    was_training = model.training
    model.eval()
    try:
        logits = model(images)
    finally:
        model.train(was_training)
    predictions = predict_argmax(logits).cpu().numpy()
    scores = score_map(logits, kind, temperature).float().cpu().numpy()
    fused = None
    if threshold is not None:
        fused = fuse(predictions, scores, threshold, logits.shape[1])
    return ScoredBatch(logits, predictions, scores, fused)


def threshold_from_labels(scores: np.ndarray, labels: np.ndarray, outlier_id: int, tpr: float = 0.95) -> float:
    """Dataset-wide threshold validated on every pixel labeled with the outlier id."""
    anomalies = np.asarray(scores)[np.asarray(labels) == outlier_id]
    if anomalies.size == 0:
        raise DomainError("No anomaly pixels to validate the threshold on")
    return select_threshold(anomalies, tpr)
