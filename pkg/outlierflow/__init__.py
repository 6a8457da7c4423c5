"""outlierflow - outlier-aware dense prediction trained on flow-generated negatives."""

__version__ = "0.1.0"

from outlierflow.core.options import RunConfig
from outlierflow.core.trainer import JointState, TrainSchedule

__all__ = ["JointState", "RunConfig", "TrainSchedule"]
