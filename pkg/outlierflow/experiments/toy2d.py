"""Planar two-class toy: a classifier trained with flow negatives against one without.

Inliers are two Gaussian blobs; the far field is a ring well outside both.
The classifier trained jointly with a point flow should be uncertain
everywhere off the data manifold, including on the ring, while the
cross-entropy-only baseline stays confident far from the data.
"""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from outlierflow.core.classifier import PointClassifier, predict_argmax
from outlierflow.core.divergences import divergence_from_logits
from outlierflow.core.errors import NumericError
from outlierflow.core.flow import FlowModel
from outlierflow.core.metrics import auroc
from outlierflow.core.options import RunConfig, Toy2DConfig
from outlierflow.core.scoring import score_map
from outlierflow.core.trainer import apply_routed_gradients, seed_everything
from outlierflow.experiments.plotting import plot_scatter, plot_score_fields
from outlierflow.experiments.report import ExperimentReport

logger = logging.getLogger(__name__)


@dataclass
class Toy2DData:
    points: torch.Tensor  # (N, 2) training inliers
    labels: torch.Tensor  # (N,)
    test_points: torch.Tensor
    test_labels: torch.Tensor
    far: torch.Tensor  # (M, 2) far-field ring


def _blobs(rng: np.random.Generator, n: int, cfg: Toy2DConfig) -> Tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, 2, n)
    centers = np.where(labels[:, None] == 0, np.array([-cfg.class_offset, 0.0]), np.array([cfg.class_offset, 0.0]))
    return centers + rng.normal(0.0, cfg.class_std, (n, 2)), labels


def _ring(rng: np.random.Generator, n: int, radius: float, jitter: float) -> np.ndarray:
    angle = rng.uniform(0.0, 2 * np.pi, n)
    r = radius + rng.normal(0.0, jitter, n)
    return np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)


def make_toy2d_data(cfg: Toy2DConfig, seed: int) -> Toy2DData:
    rng = np.random.default_rng(seed)
    points, labels = _blobs(rng, cfg.n_points, cfg)
    test_points, test_labels = _blobs(rng, cfg.n_points, cfg)
    far = _ring(rng, cfg.n_far, cfg.far_radius, cfg.class_std)
    as_float = lambda a: torch.as_tensor(a, dtype=torch.float32)  # noqa: E731
    return Toy2DData(
        as_float(points),
        torch.as_tensor(labels, dtype=torch.int64),
        as_float(test_points),
        torch.as_tensor(test_labels, dtype=torch.int64),
        as_float(far),
    )


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise NumericError("non-finite loss", where=name)


def sample_minibatch(n: int, batch_size: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(0, n, (min(batch_size, n),), generator=generator)


def train_point_classifier(
    model: nn.Module,
    points: torch.Tensor,
    labels: torch.Tensor,
    steps: int,
    batch_size: int,
    lr: float,
    generator: torch.Generator,
) -> List[float]:
    """Plain cross-entropy training; returns the loss per step."""
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    history = []
    for _ in range(steps):
        idx = sample_minibatch(points.shape[0], batch_size, generator)
        loss = F.cross_entropy(model(points[idx]), labels[idx])
        _check_finite("cross-entropy", loss)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        history.append(float(loss.detach()))
    return history


def pretrain_point_flow(
    flow: FlowModel,
    points: torch.Tensor,
    steps: int,
    batch_size: int,
    lr: float,
    generator: torch.Generator,
) -> List[float]:
    """Maximum likelihood on the inlier points; returns nats per dimension per step."""
    if not flow.initialized:
        flow.initialize(points[sample_minibatch(points.shape[0], batch_size, generator)])
    optimizer = torch.optim.Adamax(flow.parameters(), lr=lr)
    flow.train()
    history = []
    for _ in range(steps):
        idx = sample_minibatch(points.shape[0], batch_size, generator)
        loss = -flow.log_prob(points[idx]).mean() / points.shape[1]
        _check_finite("negative log-likelihood", loss)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        history.append(float(loss.detach()))
    return history


@torch.no_grad()
def sector_coverage(points: torch.Tensor, center: torch.Tensor, radius: float, sectors: int) -> np.ndarray:
    """Share of ``points`` lying at least ``radius`` from ``center``, split into equal angular sectors."""
    offset = (points - center).cpu().numpy()
    far = np.hypot(offset[:, 0], offset[:, 1]) >= radius
    angle = np.arctan2(offset[:, 1], offset[:, 0])
    sector = np.minimum(((angle + np.pi) / (2 * np.pi) * sectors).astype(np.int64), sectors - 1)
    return np.bincount(sector[far], minlength=sectors) / points.shape[0]


@torch.no_grad()
def calibrate_negative_temperature(flow: FlowModel, center: torch.Tensor, cfg: Toy2DConfig, seed: int,
                                   n_samples: int = 4096) -> float:
    """Smallest ladder temperature whose flow samples surround ``center``.

    Every angular sector must hold at least ``cfg.negative_coverage`` of the
    samples beyond ``cfg.negative_radius``; the largest temperature is used
    when none qualifies.
    """
    was_training = flow.training
    flow.eval()
    ladder = sorted(cfg.negative_temperatures)
    chosen = ladder[-1]
    for temperature in ladder:
        samples = flow.sample_points(n_samples, seed=seed, temperature=temperature)
        coverage = sector_coverage(samples, center, cfg.negative_radius, cfg.negative_sectors)
        if coverage.min() >= cfg.negative_coverage:
            chosen = temperature
            break
    else:
        logger.warning("No negative temperature up to %g reaches radius %g in every sector",
                       chosen, cfg.negative_radius)
    flow.train(was_training)
    logger.debug("Negative sampling temperature %g", chosen)
    return chosen


def point_joint_step(
    classifier: nn.Module,
    flow: FlowModel,
    cls_optimizer: torch.optim.Optimizer,
    flow_optimizer: torch.optim.Optimizer,
    points: torch.Tensor,
    labels: torch.Tensor,
    lam: float,
    kind: str,
    n_negatives: int,
    generator: torch.Generator,
    temperature: float = 1.0,
) -> Dict[str, float]:
    """Joint update on points: negatives are drawn from the flow instead of pasted into images."""
    classifier.train()
    flow.train()
    negatives = flow.sample_points(n_negatives, generator=generator, temperature=temperature)
    l_cls = F.cross_entropy(classifier(points), labels)
    l_neg = divergence_from_logits(kind, classifier(negatives), dim=1).mean()
    l_nll = -flow.log_prob(points).mean() / points.shape[1]
    for name, value in (("L_cls", l_cls), ("L_neg", l_neg), ("L_nll", l_nll)):
        _check_finite(name, value)

    neg_norm_cls, neg_norm_flow = apply_routed_gradients(
        l_cls, lam * l_neg, l_nll, list(classifier.parameters()), list(flow.parameters())
    )
    cls_optimizer.step()
    flow_optimizer.step()
    return {
        "cls": float(l_cls.detach()),
        "neg": float(l_neg.detach()),
        "nll": float(l_nll.detach()),
        "total": float((l_cls + lam * l_neg + l_nll).detach()),
        "neg_grad_cls": neg_norm_cls,
        "neg_grad_flow": neg_norm_flow,
    }


def train_point_joint(
    classifier: nn.Module,
    flow: FlowModel,
    points: torch.Tensor,
    labels: torch.Tensor,
    steps: int,
    batch_size: int,
    n_negatives: int,
    lr: float,
    lam: float,
    kind: str,
    generator: torch.Generator,
    progress_callback: Optional[Callable[[float, str], None]] = None,
    temperature: float = 1.0,
    recalibrate: Optional[Callable[[], float]] = None,
    recalibrate_every: int = 0,
) -> List[Dict[str, float]]:
    """Joint training loop; ``recalibrate`` refreshes the negative temperature every ``recalibrate_every`` steps."""
    cls_optimizer = torch.optim.Adam(classifier.parameters(), lr=lr)
    flow_optimizer = torch.optim.Adamax(flow.parameters(), lr=lr)
    history = []
    for step in range(steps):
        if recalibrate is not None and recalibrate_every and step and step % recalibrate_every == 0:
            temperature = recalibrate()
        idx = sample_minibatch(points.shape[0], batch_size, generator)
        row = point_joint_step(
            classifier, flow, cls_optimizer, flow_optimizer,
            points[idx], labels[idx], lam, kind, n_negatives, generator, temperature,
        )
        history.append({"step": step + 1, "temperature": temperature, **row})
        if progress_callback and (step + 1) % 50 == 0:
            progress_callback(100.0 * (step + 1) / steps, f"Step {step + 1}: total {row['total']:.4f}")
    return history


@torch.no_grad()
def score_field(model: nn.Module, kind: str, temperature: float, extent: float,
                resolution: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anomaly score of ``model`` on a square grid [-extent, extent]^2."""
    axis = np.linspace(-extent, extent, resolution)
    xx, yy = np.meshgrid(axis, axis)
    grid = torch.as_tensor(np.stack([xx.ravel(), yy.ravel()], axis=1), dtype=torch.float32)
    model.eval()
    scores = score_map(model(grid), kind, temperature).numpy().reshape(xx.shape)
    return xx, yy, scores


@torch.no_grad()
def far_field_auroc(model: nn.Module, inliers: torch.Tensor, far: torch.Tensor, kind: str,
                    temperature: float = 1.0) -> float:
    """AUROC of the far-field ring (positive) against held-out inliers."""
    model.eval()
    scores = np.r_[
        score_map(model(inliers), kind, temperature).numpy(),
        score_map(model(far), kind, temperature).numpy(),
    ]
    labels = np.r_[np.zeros(inliers.shape[0]), np.ones(far.shape[0])]
    return auroc(scores, labels)


@torch.no_grad()
def _accuracy(model: nn.Module, points: torch.Tensor, labels: torch.Tensor) -> float:
    model.eval()
    return float((predict_argmax(model(points)) == labels).float().mean())


def _history_table(history: Sequence[Dict[str, float]]) -> List[List]:
    if not history:
        return [["step"]]
    keys = list(history[0])
    return [keys] + [[row[k] for k in keys] for row in history]


def toy2d_run(
    config: RunConfig,
    out_dir: Union[str, Path],
    progress_callback: Optional[Callable[[float, str], None]] = None,
) -> ExperimentReport:
    """Train the baseline and the flow-negative classifier, then plot and score both."""
    cfg = config.toy2d
    kind = config.loss_kind
    seed_everything(config.seed, config.deterministic)
    report = ExperimentReport("toy2d", config.to_dict(), out_dir)

    def report_progress(pct: float, msg: str):
        if progress_callback:
            progress_callback(pct, msg)

    data = make_toy2d_data(cfg, config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    classifier = PointClassifier(2, 2, cfg.hidden)
    flow = FlowModel.for_points(2, cfg.flow_steps, cfg.flow_hidden, config.coupling_scale_bound)

    report_progress(0, "Pre-training classifier...")
    train_point_classifier(classifier, data.points, data.labels, cfg.pretrain_steps, cfg.batch_size,
                           cfg.lr, generator)
    report_progress(15, "Pre-training flow...")
    pretrain_point_flow(flow, data.points, cfg.pretrain_steps, cfg.batch_size, cfg.lr, generator)

    # Same starting point and step count, cross-entropy only.
    baseline = copy.deepcopy(classifier)
    report_progress(30, "Training baseline...")
    train_point_classifier(baseline, data.points, data.labels, cfg.joint_steps, cfg.batch_size, cfg.lr, generator)

    center = data.points.mean(dim=0)

    def calibrate() -> float:
        return calibrate_negative_temperature(flow, center, cfg, config.seed)

    temperature = calibrate()
    logger.info("Flow negatives drawn at temperature %g", temperature)

    report_progress(45, "Joint training...")
    history = train_point_joint(
        classifier, flow, data.points, data.labels, cfg.joint_steps, cfg.batch_size, cfg.n_negatives,
        cfg.lr, cfg.lam, kind, generator,
        lambda pct, msg: report_progress(45 + 0.45 * pct, msg),
        temperature=temperature,
        recalibrate=calibrate,
        recalibrate_every=cfg.negative_recalibrate_every,
    )
    temperature = history[-1]["temperature"] if history else temperature
    report.add_table("joint_losses", _history_table(history))

    report_progress(90, "Scoring...")
    report.metrics.update({
        "auroc_baseline_msp": far_field_auroc(baseline, data.test_points, data.far, "msp"),
        "auroc_baseline_maxlogit": far_field_auroc(baseline, data.test_points, data.far, "maxlogit"),
        f"auroc_joint_{kind}": far_field_auroc(classifier, data.test_points, data.far, kind),
        "auroc_joint_msp": far_field_auroc(classifier, data.test_points, data.far, "msp"),
        "accuracy_baseline": _accuracy(baseline, data.test_points, data.test_labels),
        "accuracy_joint": _accuracy(classifier, data.test_points, data.test_labels),
        "negative_temperature": float(temperature),
    })

    xx, yy, baseline_field = score_field(baseline, "msp", 1.0, cfg.grid_extent, cfg.grid_resolution)
    _, _, joint_field = score_field(classifier, kind, 1.0, cfg.grid_extent, cfg.grid_resolution)
    path = plot_score_fields(
        xx, yy,
        {"max-softmax, no negatives": baseline_field, f"{kind.upper()} score, flow negatives": joint_field},
        data.points.numpy(), data.labels.numpy(), report.out_dir / "score_fields.png",
    )
    report.add_figure("score_fields", path)

    with torch.no_grad():
        negatives = flow.sample_points(cfg.n_negatives, seed=config.seed, temperature=temperature).numpy()
    report.add_table("flow_negatives", [["x", "y"]] + negatives.tolist())
    path = plot_scatter(
        {
            "class 0": data.points[data.labels == 0].numpy(),
            "class 1": data.points[data.labels == 1].numpy(),
            "far field": data.far.numpy(),
            "flow negatives": negatives,
        },
        report.out_dir / "flow_negatives.png",
        title="Flow negatives after joint training",
        extent=cfg.grid_extent,
    )
    report.add_figure("flow_negatives", path)

    logger.info(
        "toy2d: far-field AUROC joint %.4f, baseline %.4f",
        report.metrics[f"auroc_joint_{kind}"], report.metrics["auroc_baseline_msp"],
    )
    report_progress(100, "Complete!")
    return report.finish()
