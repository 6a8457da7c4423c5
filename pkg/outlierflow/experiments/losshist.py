"""Per-pixel negative-loss histograms for each divergence kind at the start of joint training."""

import logging
import math
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from outlierflow.core.composer import compose_batch, loss_masks, sample_patch_spec
from outlierflow.core.data_io import SplitData
from outlierflow.core.divergences import divergence_from_logits, divergence_to_uniform
from outlierflow.core.flow import FlowModel
from outlierflow.core.options import LOSS_KINDS, RunConfig
from outlierflow.experiments.plotting import plot_histograms
from outlierflow.experiments.report import ExperimentReport
from outlierflow.experiments.tables import Table

logger = logging.getLogger(__name__)

# Logit margin of the constructed confident pixel: softmax puts ~1 - 1e-13 on one class.
ONE_HOT_MARGIN = 30.0


@torch.no_grad()
def negative_pixel_losses(
    classifier: nn.Module,
    flow: FlowModel,
    data: SplitData,
    config: RunConfig,
    n_images: Optional[int] = None,
) -> Dict[str, np.ndarray]:
    """lam_kind * divergence per negative pixel for every loss kind.

    One set of patches is sampled and composed, so the kinds see identical
    inputs and logits.
    """
    n = len(data) if n_images is None else min(n_images, len(data))
    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    classifier.eval()
    flow.eval()

    values: Dict[str, list] = {kind: [] for kind in LOSS_KINDS}
    hw = tuple(data.images.shape[-2:])
    for start in range(0, n, config.batch_size):
        images = data.images[start : min(start + config.batch_size, n)]
        specs = [sample_patch_spec(rng, hw, (config.patch_min, config.patch_max), flow.grid_unit)
                 for _ in range(images.shape[0])]
        patches = [flow.sample(s.height, s.width, n=1, generator=generator)[0] for s in specs]
        batch = compose_batch(images, patches, specs)
        _, negative = loss_masks(batch)
        logits = classifier(batch.images)
        for kind in LOSS_KINDS:
            per_pixel = config.loss_weights[kind] * divergence_from_logits(kind, logits, dim=1)
            values[kind].append(per_pixel[negative].cpu().numpy())
    return {kind: np.concatenate(v) if v else np.zeros(0) for kind, v in values.items()}


def confident_pixel_losses(config: RunConfig) -> Dict[str, float]:
    """lam_kind * divergence of a near-one-hot prediction over ``num_classes`` classes."""
    logits = torch.zeros(config.num_classes, dtype=torch.float64)
    logits[0] = ONE_HOT_MARGIN
    probs = torch.softmax(logits, dim=0)
    return {kind: config.loss_weights[kind] * divergence_to_uniform(kind, probs) for kind in LOSS_KINDS}


def loss_histogram_study(
    classifier: nn.Module,
    flow: FlowModel,
    data: SplitData,
    config: RunConfig,
    out_dir: Union[str, Path],
    n_images: Optional[int] = None,
    bins: int = 50,
) -> ExperimentReport:
    report = ExperimentReport("losshist", config.to_dict(), out_dir)
    values = negative_pixel_losses(classifier, flow, data, config, n_images)
    constructed = confident_pixel_losses(config)

    edges = np.histogram_bin_edges(np.concatenate([v for v in values.values() if v.size]), bins=bins)
    table: Table = [["bin_lo", "bin_hi"] + list(LOSS_KINDS)]
    counts = {kind: np.histogram(values[kind], bins=edges)[0] for kind in LOSS_KINDS}
    for i in range(bins):
        table.append([float(edges[i]), float(edges[i + 1])] + [int(counts[k][i]) for k in LOSS_KINDS])
    report.add_table("neg_loss_histogram", table)

    for kind in LOSS_KINDS:
        lam = config.loss_weights[kind]
        report.metrics[f"{kind}_lambda"] = lam
        report.metrics[f"{kind}_max"] = float(values[kind].max()) if values[kind].size else 0.0
        report.metrics[f"{kind}_confident_pixel"] = constructed[kind]
        report.metrics[f"{kind}_bound_ln2"] = lam * math.log(2.0)
    report.metrics["pixels"] = int(values["jsd"].size)

    # Worst KL seen in sampled or constructed pixels, relative to the JS bound at the same weight.
    kl_peak = max(report.metrics["kl_max"], constructed["kl"])
    report.metrics["kl_over_js_bound"] = kl_peak / (config.loss_weights["kl"] * math.log(2.0))

    path = plot_histograms(values, report.out_dir / "neg_loss_histogram.png", bins=bins, log=True,
                           xlabel="lambda * L_neg per pixel")
    report.add_figure("neg_loss_histogram", path)
    logger.info(
        "losshist: max per-pixel loss jsd %.4g kl %.4g rkl %.4g",
        report.metrics["jsd_max"], report.metrics["kl_max"], report.metrics["rkl_max"],
    )
    return report.finish()
