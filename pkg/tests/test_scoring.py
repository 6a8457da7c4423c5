import numpy as np
import pytest
import torch

from outlierflow.core.classifier import SegmentationNet
from outlierflow.core.errors import ConfigurationError, DomainError
from outlierflow.core.scoring import (
    OODScoreKind,
    fuse,
    score_image_batch,
    score_map,
    select_threshold,
    threshold_from_labels,
)

KINDS = [k.value for k in OODScoreKind]


def test_threshold_keeps_ninety_five_percent():
    scores = np.arange(1, 101, dtype=np.float64)
    delta = select_threshold(scores, 0.95)
    assert delta == 5.0
    assert np.mean(scores > delta) == pytest.approx(0.95)


def test_threshold_below_minimum_when_nothing_can_be_excluded():
    delta = select_threshold([3.0, 4.0, 5.0], 1.0)
    assert delta < 3.0
    assert delta == np.nextafter(3.0, -np.inf)


def test_threshold_respects_ties():
    delta = select_threshold([1.0, 1.0, 1.0, 2.0], 0.5)
    assert delta < 1.0


def test_threshold_guarantees_rate_on_random_scores():
    rng = np.random.default_rng(1)
    for tpr in (0.5, 0.9, 0.95, 0.99):
        scores = rng.integers(0, 20, size=257).astype(np.float64)
        delta = select_threshold(scores, tpr)
        assert np.mean(scores > delta) >= tpr - 1e-12


def test_threshold_errors():
    with pytest.raises(DomainError):
        select_threshold([], 0.95)
    with pytest.raises(ConfigurationError):
        select_threshold([1.0], 0.0)


@pytest.mark.parametrize("kind", KINDS)
def test_uniform_prediction_is_most_anomalous(kind):
    uniform = torch.zeros(1, 3)
    confident = torch.tensor([[10.0, 0.0, 0.0]])
    assert float(score_map(uniform, kind)[0]) > float(score_map(confident, kind)[0])


@pytest.mark.parametrize("kind", ["jsd", "kl", "rkl"])
def test_divergence_scores_peak_at_zero(kind):
    assert float(score_map(torch.zeros(1, 4), kind)[0]) == pytest.approx(0.0, abs=1e-6)
    assert float(score_map(torch.tensor([[3.0, 0.0, 1.0, 0.0]]), kind)[0]) < 0.0


def test_msp_and_maxlogit_values():
    logits = torch.tensor([[2.0, 0.0]])
    expected_msp = 1.0 - 1.0 / (1.0 + np.exp(-2.0))
    assert float(score_map(logits, "msp")[0]) == pytest.approx(expected_msp, rel=1e-5)
    assert float(score_map(logits, "maxlogit", temperature=5.0)[0]) == pytest.approx(-2.0)


def test_temperature_raises_msp_of_confident_logits():
    logits = torch.tensor([[3.0, 0.0, 0.0]])
    assert float(score_map(logits, "msp", 10.0)[0]) > float(score_map(logits, "msp", 1.0)[0])


@pytest.mark.parametrize(
    "shape, expected",
    [((3, 5, 6), (5, 6)), ((2, 3, 5, 6), (2, 5, 6)), ((7, 3), (7,))],
)
def test_score_map_shapes(shape, expected):
    assert score_map(torch.randn(shape), "jsd").shape == expected


def test_score_map_errors():
    with pytest.raises(ConfigurationError):
        score_map(torch.randn(4), "jsd")
    with pytest.raises(ConfigurationError):
        score_map(torch.randn(2, 3), "entropy")
    with pytest.raises(ConfigurationError):
        score_map(torch.randn(2, 3), "msp", temperature=-1.0)


def test_fuse_overrides_only_above_threshold():
    closed = np.array([[0, 1], [2, 1]])
    scores = np.array([[0.1, 0.9], [0.5, 0.5]])
    fused = fuse(closed, scores, 0.5, num_classes=3)
    np.testing.assert_array_equal(fused.labels, [[0, 3], [2, 1]])
    assert fused.outlier_id == 3
    with pytest.raises(ConfigurationError):
        fuse(closed, scores[:1], 0.5, 3)


def test_fuse_with_infinite_threshold_keeps_closed_set():
    rng = np.random.default_rng(5)
    closed = rng.integers(0, 3, size=(6, 7))
    scores = rng.normal(size=(6, 7)) * 1e6
    np.testing.assert_array_equal(fuse(closed, scores, np.inf, num_classes=3).labels, closed)


@pytest.mark.parametrize("kind", ["jsd", "msp", "kl", "rkl"])
def test_softmax_scores_ignore_per_pixel_logit_shift(kind):
    generator = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 4, 5, 6, generator=generator, dtype=torch.float64)
    shift = torch.randn(2, 1, 5, 6, generator=generator, dtype=torch.float64) * 10
    torch.testing.assert_close(score_map(logits + shift, kind, 2.0), score_map(logits, kind, 2.0))


def test_maxlogit_moves_with_logit_shift():
    logits = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    torch.testing.assert_close(score_map(logits + 1.5, "maxlogit"), score_map(logits, "maxlogit") - 1.5)


def test_jsd_scores_stay_in_range():
    logits = torch.randn(64, 6, dtype=torch.float64) * torch.logspace(-2, 2, 64, dtype=torch.float64)[:, None]
    scores = score_map(logits, "jsd")
    assert float(scores.max()) <= 1e-12
    assert float(scores.min()) >= -np.log(2.0) - 1e-12


def test_score_image_batch_restores_mode():
    model = SegmentationNet(3, 3, 4)
    model.train()
    images = torch.rand(2, 3, 16, 16)
    scored = score_image_batch(model, images, "jsd", 2.0, threshold=-0.01)
    assert model.training
    assert scored.scores.shape == (2, 16, 16)
    assert scored.predictions.shape == (2, 16, 16)
    assert scored.scores.dtype == np.float32
    expected = np.where(scored.scores > -0.01, 3, scored.predictions)
    np.testing.assert_array_equal(scored.fused.labels, expected)


def test_threshold_from_labels():
    scores = np.array([0.1, 0.2, 0.8, 0.9])
    labels = np.array([0, 1, 2, 2])
    assert threshold_from_labels(scores, labels, outlier_id=2, tpr=1.0) < 0.8
    with pytest.raises(DomainError):
        threshold_from_labels(scores, np.zeros(4), outlier_id=2)
