"""Model construction and per-epoch evaluation shared by the CLI and the grids."""

from typing import Callable, Dict, Sequence, Tuple

import numpy as np

from outlierflow.core.classifier import SegmentationNet
from outlierflow.core.data_io import SplitData
from outlierflow.core.flow import FlowModel
from outlierflow.core.gan import GanPair
from outlierflow.core.metrics import evaluate_classifier
from outlierflow.core.options import RunConfig
from outlierflow.core.trainer import JointState, random_crops

Scoring = Tuple[str, float]


def build_classifier(config: RunConfig) -> SegmentationNet:
    return SegmentationNet(config.num_classes, 3, config.classifier_width)


def build_flow(config: RunConfig) -> FlowModel:
    return FlowModel.for_images(3, config.flow_levels, config.flow_steps, config.flow_hidden,
                                config.coupling_scale_bound)


def build_gan(config: RunConfig) -> GanPair:
    return GanPair.for_patches(3, hidden=config.flow_hidden, levels=config.flow_levels, lr=config.flow_lr)


def initialize_flow(flow: FlowModel, data: SplitData, config: RunConfig) -> FlowModel:
    """Data-dependent ActNorm init on the same reference crops flow pre-training uses."""
    rng = np.random.default_rng(config.seed)
    flow.initialize(random_crops(data.images[: config.batch_size], config.crop_size, rng))
    return flow


def scoring_tag(kind: str, temperature: float) -> str:
    return f"{kind}@T{temperature:g}"


def make_eval_fn(
    test: SplitData,
    num_classes: int,
    scorings: Sequence[Scoring],
    tpr: float = 0.95,
    batch_size: int = 16,
) -> Callable[[JointState], Dict[str, float]]:
    """Evaluate the held-out split once per (score kind, temperature).

    Keys are ``<kind>@T<t>/<metric>``.
    """

    def eval_fn(state: JointState) -> Dict[str, float]:
        row: Dict[str, float] = {}
        for kind, temperature in scorings:
            result = evaluate_classifier(state.classifier, test, num_classes, kind, temperature, tpr,
                                         batch_size=batch_size)
            tag = scoring_tag(kind, temperature)
            for metric in ("ap", "auroc", "fpr95", "miou", "open_miou"):
                row[f"{tag}/{metric}"] = getattr(result, metric)
        return row

    return eval_fn

