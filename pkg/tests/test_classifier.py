import pytest
import torch

from outlierflow.core.classifier import (
    PointClassifier,
    SegmentationNet,
    forward_logits,
    max_logit,
    predict_argmax,
)
from outlierflow.core.errors import ConfigurationError


def test_segmentation_net_keeps_spatial_size():
    model = SegmentationNet(5, 3, 4)
    logits = model(torch.rand(2, 3, 16, 24))
    assert logits.shape == (2, 5, 16, 24)


def test_segmentation_net_input_checks():
    model = SegmentationNet(3, 3, 4)
    with pytest.raises(ConfigurationError):
        model(torch.rand(1, 3, 18, 16))
    with pytest.raises(ConfigurationError):
        model(torch.rand(1, 1, 16, 16))


def test_forward_logits_accepts_single_image():
    model = SegmentationNet(3, 3, 4).eval()
    assert forward_logits(model, torch.rand(3, 8, 8)).shape == (3, 8, 8)


def test_point_classifier():
    model = PointClassifier(2, 2, 8)
    assert model(torch.randn(7, 2)).shape == (7, 2)
    with pytest.raises(ConfigurationError):
        model(torch.randn(7, 3))


def test_argmax_ties_go_to_lowest_id():
    logits = torch.tensor([[1.0, 1.0, 0.0]])
    assert predict_argmax(logits).tolist() == [0]
    dense = torch.zeros(2, 3, 2, 2)
    dense[:, 2] = 1.0
    assert predict_argmax(dense).unique().tolist() == [2]
    assert max_logit(dense).unique().tolist() == [1.0]
