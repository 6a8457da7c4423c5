"""Two-stage training.

Stage one pre-trains the classifier (cross-entropy over inlier pixels) and the
flow (negative log-likelihood of random inlier crops). Stage two fine-tunes
both jointly on mixed-content batches: every image gets one patch sampled
from the flow, the classifier is pushed towards uniform predictions on the
pasted pixels, and the flow keeps modelling the inlier crops it replaced.
"""

import csv
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from outlierflow.core.checkpoint import load_checkpoint, save_checkpoint
from outlierflow.core.composer import MixedBatch, compose_batch, loss_masks, sample_patch_spec
from outlierflow.core.data_io import IGNORE_ID, SplitData
from outlierflow.core.divergences import divergence_from_logits
from outlierflow.core.errors import ConfigurationError, DomainError, NumericError
from outlierflow.core.flow import LN256, FlowModel, bits_per_dim
from outlierflow.core.gan import GanPair, discriminator_step, fooling_term
from outlierflow.core.options import LOSS_KINDS, RunConfig

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[float, str], None]


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class TrainSchedule:
    """Stage lengths, learning rates and the negative-loss setup."""

    cls_epochs: int = 5
    flow_epochs: int = 3
    joint_epochs: int = 10
    batch_size: int = 16
    cls_lr: float = 1e-3
    flow_lr: float = 1e-3
    joint_cls_lr: float = 1e-4
    joint_flow_lr: float = 1e-4
    min_lr: float = 1e-7
    crop_size: int = 32
    patch_range: Tuple[int, int] = (8, 32)
    lam: float = 3e-2
    loss_kind: str = "jsd"
    seed: int = 7

    def __post_init__(self):
        if min(self.cls_epochs, self.flow_epochs, self.joint_epochs) < 0:
            raise ConfigurationError("Epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.lam < 0:
            raise ConfigurationError("lam must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}")
        self.patch_range = tuple(self.patch_range)

    @classmethod
    def from_config(cls, config: RunConfig) -> "TrainSchedule":
        return cls(
            cls_epochs=config.cls_epochs,
            flow_epochs=config.flow_epochs,
            joint_epochs=config.joint_epochs,
            batch_size=config.batch_size,
            cls_lr=config.cls_lr,
            flow_lr=config.flow_lr,
            joint_cls_lr=config.joint_cls_lr,
            joint_flow_lr=config.joint_flow_lr,
            min_lr=config.min_lr,
            crop_size=config.crop_size,
            patch_range=(config.patch_min, config.patch_max),
            lam=config.lam,
            loss_kind=config.loss_kind,
            seed=config.seed,
        )

    def steps_per_epoch(self, n: int) -> int:
        return max(1, math.ceil(n / self.batch_size))


@dataclass
class StageResult:
    model: nn.Module
    history: List[float] = field(default_factory=list)
    initial: Optional[float] = None


def _report(progress_callback: Optional[ProgressCallback], pct: float, msg: str) -> None:
    if progress_callback:
        progress_callback(pct, msg)


def _batches(n: int, batch_size: int, generator: torch.Generator) -> List[torch.Tensor]:
    return list(torch.randperm(n, generator=generator).split(batch_size))


def _cosine(optimizer: torch.optim.Optimizer, total_steps: int, min_lr: float):
    return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, total_steps), eta_min=min_lr)


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise NumericError("non-finite loss", where=name)


def pretrain_classifier(
    model: nn.Module,
    data: SplitData,
    schedule: TrainSchedule,
    progress_callback: Optional[ProgressCallback] = None,
) -> StageResult:
    """Per-pixel cross-entropy over inlier pixels; ignore pixels are excluded."""
    if len(data) == 0:
        raise DomainError("Cannot pre-train on an empty dataset")
    supervised = data.labels != IGNORE_ID
    if not supervised.any():
        raise DomainError("Labels contain no supervised pixels")
    if (data.labels[supervised] >= model.num_classes).any():
        raise DomainError("Training labels contain the outlier id")

    generator = torch.Generator().manual_seed(schedule.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=schedule.cls_lr)
    scheduler = _cosine(optimizer, schedule.cls_epochs * schedule.steps_per_epoch(len(data)), schedule.min_lr)
    result = StageResult(model)

    for epoch in range(schedule.cls_epochs):
        model.train()
        total, pixels = 0.0, 0
        for idx in _batches(len(data), schedule.batch_size, generator):
            labels = data.labels[idx]
            count = int((labels != IGNORE_ID).sum())
            if count == 0:
                continue
            loss = F.cross_entropy(model(data.images[idx]), labels, ignore_index=IGNORE_ID)
            _check_finite("cross-entropy", loss)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            total += float(loss.detach()) * count
            pixels += count
        result.history.append(total / max(pixels, 1))
        logger.info("classifier epoch %d/%d: CE %.4f", epoch + 1, schedule.cls_epochs, result.history[-1])
        _report(progress_callback, 100.0 * (epoch + 1) / schedule.cls_epochs,
                f"Epoch {epoch + 1}: CE {result.history[-1]:.4f}")
    return result


def random_crops(images: torch.Tensor, crop_size: int, rng: np.random.Generator) -> torch.Tensor:
    """One random square crop per image."""
    h, w = images.shape[-2:]
    crops = []
    for image in images:
        top = int(rng.integers(0, h - crop_size + 1))
        left = int(rng.integers(0, w - crop_size + 1))
        crops.append(image[:, top : top + crop_size, left : left + crop_size])
    return torch.stack(crops)


def _nll_per_dim(flow: FlowModel, x: torch.Tensor, generator: Optional[torch.Generator]) -> torch.Tensor:
    return -flow.log_prob(x, dequantize=True, generator=generator) / x[0].numel()


def pretrain_flow(
    model: FlowModel,
    data: SplitData,
    crop_size: int,
    schedule: TrainSchedule,
    progress_callback: Optional[ProgressCallback] = None,
) -> StageResult:
    """Maximum likelihood on random inlier crops. History holds bits/dim per epoch."""
    if len(data) == 0:
        raise DomainError("Cannot pre-train on an empty dataset")
    model.check_size(crop_size, crop_size)
    h, w = data.images.shape[-2:]
    if crop_size > min(h, w):
        raise ConfigurationError(f"Crop {crop_size} exceeds image size {h}x{w}")

    rng = np.random.default_rng(schedule.seed)
    generator = torch.Generator().manual_seed(schedule.seed)
    optimizer = torch.optim.Adamax(model.parameters(), lr=schedule.flow_lr)
    scheduler = _cosine(optimizer, schedule.flow_epochs * schedule.steps_per_epoch(len(data)), schedule.min_lr)

    reference = random_crops(data.images[: schedule.batch_size], crop_size, rng)
    if not model.initialized:
        model.initialize(reference)
    with torch.no_grad():
        initial = float(bits_per_dim(model, reference, generator=generator))
    result = StageResult(model, initial=initial)
    logger.info("flow at init: %.4f bits/dim", initial)

    for epoch in range(schedule.flow_epochs):
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(data), schedule.batch_size, generator):
            crops = random_crops(data.images[idx], crop_size, rng)
            loss = _nll_per_dim(model, crops, generator).mean()
            _check_finite("negative log-likelihood", loss)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        bpd = (total / count + LN256) / math.log(2.0)
        result.history.append(bpd)
        logger.info("flow epoch %d/%d: %.4f bits/dim", epoch + 1, schedule.flow_epochs, bpd)
        _report(progress_callback, 100.0 * (epoch + 1) / schedule.flow_epochs,
                f"Epoch {epoch + 1}: {bpd:.3f} bits/dim")
    return result


@dataclass
class LossBreakdown:
    """Loss components of one joint step plus the gradient norms of the lam * L_neg term."""

    cls: float
    neg: float
    nll: float
    adv: float
    total: float
    neg_grad_theta: float
    neg_grad_gamma: float
    max_neg_pixel: float
    neg_pixels: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


@dataclass
class JointState:
    """Everything needed to resume joint training bit-exactly."""

    classifier: nn.Module
    flow: Optional[FlowModel]
    cls_optimizer: torch.optim.Optimizer
    cls_scheduler: object
    flow_optimizer: Optional[torch.optim.Optimizer] = None
    flow_scheduler: Optional[object] = None
    gan: Optional[GanPair] = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    generator: torch.Generator = field(default_factory=torch.Generator)
    epoch: int = 0
    step: int = 0
    classifier_frozen: bool = False
    # Freezes whichever model supplies the negatives (flow or GAN generator).
    flow_frozen: bool = False
    history: List[Dict[str, float]] = field(default_factory=list)

    @classmethod
    def create(
        cls,
        classifier: nn.Module,
        flow: Optional[FlowModel],
        schedule: TrainSchedule,
        steps_per_epoch: int,
        gan: Optional[GanPair] = None,
    ) -> "JointState":
        if flow is None and gan is None:
            raise ConfigurationError("Joint training needs a flow or a GAN to generate negatives")
        total = schedule.joint_epochs * steps_per_epoch
        cls_optimizer = torch.optim.Adam(classifier.parameters(), lr=schedule.joint_cls_lr)
        flow_optimizer = flow_scheduler = None
        if flow is not None:
            flow_optimizer = torch.optim.Adamax(flow.parameters(), lr=schedule.joint_flow_lr)
            flow_scheduler = _cosine(flow_optimizer, total, schedule.min_lr)
        return cls(
            classifier=classifier,
            flow=flow,
            cls_optimizer=cls_optimizer,
            cls_scheduler=_cosine(cls_optimizer, total, schedule.min_lr),
            flow_optimizer=flow_optimizer,
            flow_scheduler=flow_scheduler,
            gan=gan,
            rng=np.random.default_rng(schedule.seed),
            generator=torch.Generator().manual_seed(schedule.seed),
        )

    @property
    def source(self) -> str:
        return "gan" if self.gan is not None else "flow"

    @property
    def grid_unit(self) -> int:
        if self.gan is not None:
            return 2 ** self.gan.generator.levels
        return self.flow.grid_unit

    def generator_parameters(self) -> List[nn.Parameter]:
        if self.flow_frozen:
            return []
        model = self.gan.generator if self.gan is not None else self.flow
        return list(model.parameters())

    def classifier_parameters(self) -> List[nn.Parameter]:
        return [] if self.classifier_frozen else list(self.classifier.parameters())

    def state_dict(self) -> dict:
        return {
            "classifier": self.classifier.state_dict(),
            "flow": self.flow.state_dict() if self.flow is not None else None,
            "cls_optimizer": self.cls_optimizer.state_dict(),
            "cls_scheduler": self.cls_scheduler.state_dict(),
            "flow_optimizer": self.flow_optimizer.state_dict() if self.flow_optimizer else None,
            "flow_scheduler": self.flow_scheduler.state_dict() if self.flow_scheduler else None,
            "gan": self.gan.state_dict() if self.gan is not None else None,
            "rng": self.rng.bit_generator.state,
            "generator": self.generator.get_state(),
            "epoch": self.epoch,
            "step": self.step,
            "history": list(self.history),
        }

    def load_state_dict(self, state: dict) -> None:
        self.classifier.load_state_dict(state["classifier"])
        self.cls_optimizer.load_state_dict(state["cls_optimizer"])
        self.cls_scheduler.load_state_dict(state["cls_scheduler"])
        if self.flow is not None and state["flow"] is not None:
            self.flow.load_state_dict(state["flow"])
            self.flow_optimizer.load_state_dict(state["flow_optimizer"])
            self.flow_scheduler.load_state_dict(state["flow_scheduler"])
        if self.gan is not None and state["gan"] is not None:
            self.gan.load_state_dict(state["gan"])
        self.rng.bit_generator.state = state["rng"]
        self.generator.set_state(state["generator"])
        self.epoch = state["epoch"]
        self.step = state["step"]
        self.history = list(state["history"])


def save_state(state: JointState, path: Union[str, Path], config: Optional[dict] = None) -> Path:
    return save_checkpoint(path, "joint", state.state_dict(), config)


def load_state(state: JointState, path: Union[str, Path]) -> JointState:
    state.load_state_dict(load_checkpoint(path, "joint")["state"])
    return state


def _sample_negative(state: JointState, height: int, width: int) -> torch.Tensor:
    if state.gan is not None:
        return state.gan.sample_patches(height, width, 1, state.generator)[0]
    return state.flow.sample(height, width, n=1, generator=state.generator)[0]


def make_mixed_batch(
    state: JointState,
    images: torch.Tensor,
    labels: torch.Tensor,
    patch_range: Tuple[int, int],
) -> MixedBatch:
    """Paste one freshly generated negative patch into every image."""
    hw = tuple(images.shape[-2:])
    specs = [sample_patch_spec(state.rng, hw, patch_range, state.grid_unit) for _ in range(images.shape[0])]
    with torch.set_grad_enabled(not state.flow_frozen):
        patches = [_sample_negative(state, spec.height, spec.width) for spec in specs]
    return compose_batch(images, patches, specs, labels)


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.new_zeros(())


def joint_losses(
    state: JointState,
    batch: MixedBatch,
    lam: float,
    kind: str = "jsd",
    generator: Optional[torch.Generator] = None,
) -> Dict[str, torch.Tensor]:
    """Loss tensors of one mixed batch.

    ``cls``: mean cross-entropy over non-ignore pixels outside the patch;
    ``neg``: mean divergence to uniform (temperature 1) over patch pixels;
    ``nll``: negative log-likelihood per dimension of the replaced crops;
    ``adv``: the generator's fooling term when negatives come from a GAN.
    """
    logits = state.classifier(batch.images)
    inlier, negative = loss_masks(batch)
    ce = F.cross_entropy(logits, batch.labels, ignore_index=IGNORE_ID, reduction="none")
    neg_map = divergence_from_logits(kind, logits, dim=1)
    losses = {
        "cls": ce[inlier].mean() if inlier.any() else _zero(logits),
        "neg": neg_map[negative].mean() if negative.any() else _zero(logits),
        "neg_map": neg_map,
        "negative": negative,
        "nll": _zero(logits),
        "adv": _zero(logits),
    }
    generator = generator if generator is not None else state.generator
    if state.gan is None:
        nll = [_nll_per_dim(state.flow, crop.unsqueeze(0), generator)[0] for crop in batch.crops]
        losses["nll"] = torch.stack(nll).mean()
    else:
        fakes = [batch.images[i][(slice(None),) + spec.window()] for i, spec in enumerate(batch.specs)]
        losses["adv"] = torch.stack([fooling_term(state.gan, f.unsqueeze(0)) for f in fakes]).mean()
    return losses


def _grads(loss: torch.Tensor, params: Sequence[nn.Parameter]) -> List[Optional[torch.Tensor]]:
    if not params or not loss.requires_grad:
        return [None] * len(params)
    return list(torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True))


def _norm(grads: Sequence[Optional[torch.Tensor]]) -> float:
    total = sum(float(g.pow(2).sum()) for g in grads if g is not None)
    return math.sqrt(total)


def apply_routed_gradients(
    l_cls: torch.Tensor,
    neg_term: torch.Tensor,
    gen_term: torch.Tensor,
    theta: Sequence[nn.Parameter],
    gamma: Sequence[nn.Parameter],
) -> Tuple[float, float]:
    """Set ``.grad`` so that cross-entropy reaches only theta, the generator term
    only gamma, and the shared negative term both. Returns the norms of the
    negative-term gradient on theta and on gamma.
    """
    theta, gamma = list(theta), list(gamma)
    g_cls = _grads(l_cls, theta)
    g_neg = _grads(neg_term, theta + gamma)
    g_gen = _grads(gen_term, gamma)
    contributions = [(theta, g_cls), (theta + gamma, g_neg), (gamma, g_gen)]
    for p in theta + gamma:
        p.grad = None
    for params, grads in contributions:
        for p, g in zip(params, grads):
            if g is not None:
                p.grad = g.clone() if p.grad is None else p.grad + g
    return _norm(g_neg[: len(theta)]), _norm(g_neg[len(theta):])


def joint_step(state: JointState, batch: MixedBatch, lam: float, kind: str = "jsd") -> LossBreakdown:
    """One simultaneous update of classifier and negative generator.

    Total loss: L_cls + lam * L_neg + L_nll, with lam * L_neg counted once and
    its gradient propagated to both models.
    """
    state.classifier.train(not state.classifier_frozen)
    if state.flow is not None:
        state.flow.train(not state.flow_frozen)

    losses = joint_losses(state, batch, lam, kind)
    for name in ("cls", "neg", "nll", "adv"):
        _check_finite(f"L_{name}", losses[name])

    theta = state.classifier_parameters()
    gamma = state.generator_parameters()
    gen_term = losses["nll"] if state.gan is None else losses["adv"]
    norm_theta, norm_gamma = apply_routed_gradients(losses["cls"], lam * losses["neg"], gen_term, theta, gamma)

    if theta:
        state.cls_optimizer.step()
        state.cls_scheduler.step()
    if gamma:
        if state.gan is None:
            state.flow_optimizer.step()
            state.flow_scheduler.step()
        else:
            state.gan.g_optimizer.step()
            for i, spec in enumerate(batch.specs):
                fake = batch.images[i][(slice(None),) + spec.window()].unsqueeze(0)
                discriminator_step(state.gan, batch.crops[i].unsqueeze(0), fake)
    state.step += 1

    neg_pixels = (lam * losses["neg_map"][losses["negative"]]).detach().cpu().numpy()
    total = losses["cls"] + lam * losses["neg"] + losses["nll"] + losses["adv"]
    return LossBreakdown(
        cls=float(losses["cls"].detach()),
        neg=float(losses["neg"].detach()),
        nll=float(losses["nll"].detach()),
        adv=float(losses["adv"].detach()),
        total=float(total.detach()),
        neg_grad_theta=norm_theta,
        neg_grad_gamma=norm_gamma,
        max_neg_pixel=float(neg_pixels.max()) if neg_pixels.size else 0.0,
        neg_pixels=neg_pixels,
    )


def _write_history(history: List[Dict[str, float]], path: Path) -> None:
    keys: List[str] = []
    for row in history:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)


def write_histogram(values: np.ndarray, path: Path, bins: int = 50) -> Path:
    counts, edges = np.histogram(values, bins=bins) if values.size else (np.zeros(bins, int), np.zeros(bins + 1))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            writer.writerow([f"{lo:.8g}", f"{hi:.8g}", int(n)])
    return path


def joint_train(
    state: JointState,
    data: SplitData,
    schedule: TrainSchedule,
    out_dir: Optional[Union[str, Path]] = None,
    eval_fn: Optional[Callable[[JointState], Dict[str, float]]] = None,
    progress_callback: Optional[ProgressCallback] = None,
    config: Optional[dict] = None,
) -> JointState:
    """Run joint steps from ``state.epoch`` up to ``schedule.joint_epochs``.

    With ``out_dir`` the loss history goes to ``losses.csv``, per-pixel
    lam * L_neg histograms to ``neg_hist_epochXX.csv`` and the state to
    ``joint_state.pt`` after every epoch. ``eval_fn`` results are merged
    into each epoch's history row.
    """
    if len(data) == 0:
        raise DomainError("Cannot train on an empty dataset")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    epochs = schedule.joint_epochs
    for epoch in range(state.epoch, epochs):
        steps: List[LossBreakdown] = []
        batches = _batches(len(data), schedule.batch_size, state.generator)
        for b, idx in enumerate(batches):
            batch = make_mixed_batch(state, data.images[idx], data.labels[idx], schedule.patch_range)
            steps.append(joint_step(state, batch, schedule.lam, schedule.loss_kind))
            pct = 100.0 * (epoch + (b + 1) / len(batches)) / epochs
            _report(progress_callback, pct, f"Epoch {epoch + 1}/{epochs} total {steps[-1].total:.4f}")

        state.epoch = epoch + 1
        neg_pixels = np.concatenate([s.neg_pixels for s in steps])
        row = {
            "epoch": state.epoch,
            "cls": float(np.mean([s.cls for s in steps])),
            "neg": float(np.mean([s.neg for s in steps])),
            "nll": float(np.mean([s.nll for s in steps])),
            "adv": float(np.mean([s.adv for s in steps])),
            "total": float(np.mean([s.total for s in steps])),
            "max_neg_pixel": float(neg_pixels.max()) if neg_pixels.size else 0.0,
        }
        if eval_fn is not None:
            row.update(eval_fn(state))
        state.history.append(row)
        logger.info(
            "joint epoch %d/%d: cls %.4f neg %.4f nll %.4f",
            state.epoch, epochs, row["cls"], row["neg"], row["nll"],
        )

        if out_dir is not None:
            _write_history(state.history, out_dir / "losses.csv")
            write_histogram(neg_pixels, out_dir / f"neg_hist_epoch{state.epoch:02d}.csv")
            save_state(state, out_dir / "joint_state.pt", config)
    return state
