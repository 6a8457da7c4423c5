"""Models, losses, scores and metrics."""

from outlierflow.core.classifier import SegmentationNet
from outlierflow.core.flow import FlowModel
from outlierflow.core.options import RunConfig
from outlierflow.core.trainer import JointState, TrainSchedule

__all__ = ["FlowModel", "JointState", "RunConfig", "SegmentationNet", "TrainSchedule"]
