"""Mode coverage of flow negatives against adversarial negatives on a ring of Gaussians."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Union

import numpy as np
import torch

from outlierflow.core.classifier import PointClassifier
from outlierflow.core.flow import FlowModel
from outlierflow.core.gan import GanPair, gan_joint_step, gan_sample
from outlierflow.core.options import CoverageConfig, RunConfig
from outlierflow.core.trainer import seed_everything
from outlierflow.experiments.plotting import plot_scatter
from outlierflow.experiments.report import ExperimentReport
from outlierflow.experiments.toy2d import sample_minibatch, train_point_classifier, train_point_joint

logger = logging.getLogger(__name__)


@dataclass
class RingMixture:
    centers: np.ndarray  # (M, 2)
    points: torch.Tensor
    modes: torch.Tensor  # mode index per point
    sigma: float

    @property
    def labels(self) -> torch.Tensor:
        """Alternating two-class labelling of the modes."""
        return self.modes % 2


def ring_mixture(cfg: CoverageConfig, seed: int) -> RingMixture:
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(cfg.modes) / cfg.modes
    centers = cfg.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    modes = rng.integers(0, cfg.modes, cfg.n_points)
    points = centers[modes] + rng.normal(0.0, cfg.sigma, (cfg.n_points, 2))
    return RingMixture(
        centers,
        torch.as_tensor(points, dtype=torch.float32),
        torch.as_tensor(modes, dtype=torch.int64),
        cfg.sigma,
    )


def mode_coverage(samples: np.ndarray, centers: np.ndarray, sigma: float, band_sigmas: float = 3.0) -> np.ndarray:
    """Per-mode flag: some sample lies in the band of width ``band_sigmas`` sigma around
    the mode boundary (the circle of radius ``band_sigmas`` sigma), inside or out.
    Samples are assigned to their nearest mode first.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    covered = np.zeros(len(centers), dtype=bool)
    if samples.size == 0:
        return covered
    distances = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=-1)
    nearest = distances.argmin(axis=1)
    reach = 2.0 * band_sigmas * sigma
    hit = distances[np.arange(len(samples)), nearest] <= reach
    covered[np.unique(nearest[hit])] = True
    return covered


def _train_gan(pair: GanPair, classifier: PointClassifier, mixture: RingMixture, cfg: CoverageConfig,
               kind: str, generator: torch.Generator, progress_callback=None) -> None:
    cls_optimizer = torch.optim.Adam(classifier.parameters(), lr=cfg.lr)
    for step in range(cfg.steps):
        idx = sample_minibatch(mixture.points.shape[0], cfg.batch_size, generator)
        classifier.train()
        _, losses = gan_joint_step(
            pair, classifier, mixture.points[idx], mixture.labels[idx], cfg.lam, kind, cls_optimizer, generator,
        )
        if progress_callback and (step + 1) % 50 == 0:
            progress_callback(100.0 * (step + 1) / cfg.steps, f"Step {step + 1}: fool {losses['fooling']:.3f}")


def coverage_diagnostic(
    config: RunConfig,
    out_dir: Union[str, Path],
    progress_callback: Optional[Callable[[float, str], None]] = None,
) -> ExperimentReport:
    """Train both negative generators with the same classifier warm-up and number of steps,
    then count the modes each one covers.
    """
    cfg = config.coverage
    kind = config.loss_kind
    seed_everything(config.seed, config.deterministic)
    report = ExperimentReport("coverage", config.to_dict(), out_dir)

    def report_progress(pct: float, msg: str):
        if progress_callback:
            progress_callback(pct, msg)

    mixture = ring_mixture(cfg, config.seed)
    generator = torch.Generator().manual_seed(config.seed)

    report_progress(0, "Warming up classifier...")
    warm = PointClassifier(2, 2, cfg.hidden)
    train_point_classifier(warm, mixture.points, mixture.labels, cfg.steps // 2, cfg.batch_size, cfg.lr, generator)
    warm_state = {k: v.clone() for k, v in warm.state_dict().items()}

    report_progress(10, "Training flow negatives...")
    flow_classifier = PointClassifier(2, 2, cfg.hidden)
    flow_classifier.load_state_dict(warm_state)
    flow = FlowModel.for_points(2, cfg.flow_steps, cfg.hidden, config.coupling_scale_bound)
    flow.initialize(mixture.points[sample_minibatch(mixture.points.shape[0], cfg.batch_size, generator)])
    flow_gen = torch.Generator().manual_seed(config.seed)
    train_point_joint(
        flow_classifier, flow, mixture.points, mixture.labels, cfg.steps, cfg.batch_size, cfg.batch_size,
        cfg.lr, cfg.lam, kind, flow_gen, lambda pct, msg: report_progress(10 + 0.4 * pct, msg),
    )

    report_progress(50, "Training GAN negatives...")
    gan_classifier = PointClassifier(2, 2, cfg.hidden)
    gan_classifier.load_state_dict(warm_state)
    pair = GanPair.for_points(2, cfg.gan_latent, cfg.hidden, cfg.lr)
    gan_gen = torch.Generator().manual_seed(config.seed)
    _train_gan(pair, gan_classifier, mixture, cfg, kind, gan_gen,
               lambda pct, msg: report_progress(50 + 0.4 * pct, msg))

    report_progress(90, "Counting covered modes...")
    with torch.no_grad():
        flow_samples = flow.sample_points(cfg.n_samples, seed=config.seed).numpy()
    gan_samples = gan_sample(pair, cfg.n_samples, config.seed).numpy()
    samples: Dict[str, np.ndarray] = {"flow": flow_samples, "gan": gan_samples}

    rows = [["mode", "x", "y", "flow", "gan"]]
    coverage = {name: mode_coverage(s, mixture.centers, cfg.sigma, cfg.band_sigmas) for name, s in samples.items()}
    for m, (x, y) in enumerate(mixture.centers):
        rows.append([m, float(x), float(y), int(coverage["flow"][m]), int(coverage["gan"][m])])
    report.add_table("mode_coverage", rows)
    for name, s in samples.items():
        report.add_table(f"{name}_samples", [["x", "y"]] + s.tolist())
        report.metrics[f"{name}_modes_covered"] = int(coverage[name].sum())
    report.metrics["modes"] = cfg.modes

    band = 2.0 * cfg.band_sigmas * cfg.sigma
    circles = [(float(x), float(y), band) for x, y in mixture.centers]
    extent = cfg.radius + 3.0
    for name, s in samples.items():
        path = plot_scatter(
            {"data": mixture.points.numpy(), f"{name} negatives": s},
            report.out_dir / f"{name}_negatives.png",
            title=f"{name}: {int(coverage[name].sum())}/{cfg.modes} modes covered",
            extent=extent,
            circles=circles,
        )
        report.add_figure(f"{name}_negatives", path)

    logger.info(
        "coverage: flow %d/%d, gan %d/%d modes",
        coverage["flow"].sum(), cfg.modes, coverage["gan"].sum(), cfg.modes,
    )
    report_progress(100, "Complete!")
    return report.finish()
