"""Adversarial negative generator used as a baseline against flow negatives.

The generator minimizes ln(1 - D(G(z))) + lam * F(P_theta(G(z)), U); the
discriminator maximizes ln D(x) + ln(1 - D(G(z))). The real-data and
cross-entropy terms of the joint game carry no gradient to the generator.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from outlierflow.core.divergences import divergence_from_logits
from outlierflow.core.errors import ConfigurationError, NumericError


class PointGenerator(nn.Module):
    def __init__(self, latent_dim: int = 8, dim: int = 2, hidden: int = 64):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, dim),
        )

    def forward(self, z):
        return self.net(z)


class PointDiscriminator(nn.Module):
    def __init__(self, dim: int = 2, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )

    def forward(self, x):
        return self.net(x).squeeze(-1)


class PatchGenerator(nn.Module):
    """Fully convolutional: a (latent, h/2^levels, w/2^levels) noise map becomes a (3, h, w) patch."""

    def __init__(self, latent_dim: int = 8, channels: int = 3, hidden: int = 32, levels: int = 2):
        super().__init__()
        self.latent_dim = latent_dim
        self.levels = levels
        layers = [nn.Conv2d(latent_dim, hidden, 3, padding=1), nn.ReLU()]
        for _ in range(levels):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(hidden, hidden, 3, padding=1), nn.ReLU()]
        layers += [nn.Conv2d(hidden, channels, 3, padding=1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class PatchDiscriminator(nn.Module):
    def __init__(self, channels: int = 3, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x).mean(dim=(1, 2, 3))


@dataclass
class GanPair:
    generator: nn.Module
    discriminator: nn.Module
    latent_dim: int
    mode: str  # "points" or "patches"
    g_optimizer: torch.optim.Optimizer = field(repr=False, default=None)
    d_optimizer: torch.optim.Optimizer = field(repr=False, default=None)

    def __post_init__(self):
        if self.mode not in ("points", "patches"):
            raise ConfigurationError(f"Unknown GAN mode {self.mode!r}")
        if self.g_optimizer is None:
            self.g_optimizer = torch.optim.Adam(self.generator.parameters(), lr=1e-3, betas=(0.5, 0.999))
        if self.d_optimizer is None:
            self.d_optimizer = torch.optim.Adam(self.discriminator.parameters(), lr=1e-3, betas=(0.5, 0.999))

    @classmethod
    def for_points(cls, dim: int = 2, latent_dim: int = 8, hidden: int = 64, lr: float = 1e-3) -> "GanPair":
        generator = PointGenerator(latent_dim, dim, hidden)
        discriminator = PointDiscriminator(dim, hidden)
        return cls(
            generator,
            discriminator,
            latent_dim,
            "points",
            torch.optim.Adam(generator.parameters(), lr=lr, betas=(0.5, 0.999)),
            torch.optim.Adam(discriminator.parameters(), lr=lr, betas=(0.5, 0.999)),
        )

    @classmethod
    def for_patches(cls, channels: int = 3, latent_dim: int = 8, hidden: int = 32, levels: int = 2,
                    lr: float = 1e-4) -> "GanPair":
        generator = PatchGenerator(latent_dim, channels, hidden, levels)
        discriminator = PatchDiscriminator(channels, hidden)
        return cls(
            generator,
            discriminator,
            latent_dim,
            "patches",
            torch.optim.Adam(generator.parameters(), lr=lr, betas=(0.5, 0.999)),
            torch.optim.Adam(discriminator.parameters(), lr=lr, betas=(0.5, 0.999)),
        )

    def _noise(self, shape, generator: Optional[torch.Generator]) -> torch.Tensor:
        weight = next(self.generator.parameters())
        return torch.randn(shape, generator=generator, dtype=weight.dtype).to(weight.device)

    def sample(self, n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Point samples (n, d), differentiable w.r.t. the generator."""
        if self.mode != "points":
            raise ConfigurationError("sample() is for point mode; use sample_patches()")
        return self.generator(self._noise((n, self.latent_dim), generator))

    def sample_patches(self, height: int, width: int, n: int = 1,
                       generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if self.mode != "patches":
            raise ConfigurationError("sample_patches() is for patch mode")
        unit = 2 ** self.generator.levels
        if height % unit or width % unit or height < unit or width < unit:
            raise ConfigurationError(f"Patch size {height}x{width} must be a positive multiple of {unit}")
        return self.generator(self._noise((n, self.latent_dim, height // unit, width // unit), generator))

    def state_dict(self) -> dict:
        return {
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "g_optimizer": self.g_optimizer.state_dict(),
            "d_optimizer": self.d_optimizer.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.generator.load_state_dict(state["generator"])
        self.discriminator.load_state_dict(state["discriminator"])
        self.g_optimizer.load_state_dict(state["g_optimizer"])
        self.d_optimizer.load_state_dict(state["d_optimizer"])


def adversarial_loss_terms(
    pair: GanPair,
    classifier: nn.Module,
    real: torch.Tensor,
    fake: torch.Tensor,
    labels: Optional[torch.Tensor] = None,
    lam: float = 1.0,
    kind: str = "jsd",
) -> Dict[str, torch.Tensor]:
    """The four terms of the joint adversarial objective.

    ``real``: mean ln D(x) over data; ``fake``: mean ln(1 - D(G(z)));
    ``ce``: closed-set cross-entropy on labeled data; ``confidence``:
    lam * mean divergence to uniform of the classifier on generated samples.
    """
    real_logit = pair.discriminator(real)
    fake_logit = pair.discriminator(fake)
    terms = {
        "real": F.logsigmoid(real_logit).mean(),
        "fake": F.logsigmoid(-fake_logit).mean(),
        "confidence": lam * divergence_from_logits(kind, classifier(fake), dim=1).mean(),
    }
    if labels is not None:
        terms["ce"] = F.cross_entropy(classifier(real), labels, ignore_index=255)
    else:
        terms["ce"] = real.new_zeros(())
    return terms


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise NumericError("non-finite loss", where=name)


def discriminator_step(pair: GanPair, real: torch.Tensor, fake: torch.Tensor) -> float:
    """One ascent step of ln D(x) + ln(1 - D(G(z))) on the discriminator."""
    real_logit = pair.discriminator(real)
    fake_logit = pair.discriminator(fake.detach())
    loss = F.binary_cross_entropy_with_logits(real_logit, torch.ones_like(real_logit)) + \
        F.binary_cross_entropy_with_logits(fake_logit, torch.zeros_like(fake_logit))
    _check_finite("discriminator", loss)
    pair.d_optimizer.zero_grad(set_to_none=True)
    loss.backward()
    pair.d_optimizer.step()
    return float(loss.detach())


def fooling_term(pair: GanPair, fake: torch.Tensor) -> torch.Tensor:
    """Mean ln(1 - D(G(z))), minimized by the generator."""
    return F.logsigmoid(-pair.discriminator(fake)).mean()


def gan_joint_step(
    pair: GanPair,
    classifier: nn.Module,
    real: torch.Tensor,
    labels: Optional[torch.Tensor] = None,
    lam: float = 1.0,
    kind: str = "jsd",
    cls_optimizer: Optional[torch.optim.Optimizer] = None,
    generator: Optional[torch.Generator] = None,
    train_discriminator: bool = True,
):
    """Discriminator update, generator update on the fooling and confidence terms,
    and optionally a classifier update (cross-entropy + lam * divergence on negatives).

    Returns (pair, losses).
    """
    n = real.shape[0]
    if pair.mode == "points":
        fake = pair.sample(n, generator)
    else:
        fake = pair.sample_patches(real.shape[-2], real.shape[-1], n, generator)

    losses = {}
    if train_discriminator:
        losses["discriminator"] = discriminator_step(pair, real, fake)

    fool = fooling_term(pair, fake)
    confidence = lam * divergence_from_logits(kind, classifier(fake), dim=1).mean()
    g_loss = fool + confidence
    _check_finite("generator", g_loss)
    params = list(pair.generator.parameters())
    grads = torch.autograd.grad(g_loss, params, allow_unused=True)
    pair.g_optimizer.zero_grad(set_to_none=True)
    for p, g in zip(params, grads):
        p.grad = g
    pair.g_optimizer.step()
    losses["fooling"] = float(fool.detach())
    losses["confidence"] = float(confidence.detach())

    if cls_optimizer is not None and labels is not None:
        ce = F.cross_entropy(classifier(real), labels, ignore_index=255)
        neg = lam * divergence_from_logits(kind, classifier(fake.detach()), dim=1).mean()
        cls_loss = ce + neg
        _check_finite("classifier", cls_loss)
        cls_optimizer.zero_grad(set_to_none=True)
        cls_loss.backward()
        cls_optimizer.step()
        losses["ce"] = float(ce.detach())
    return pair, losses


@torch.no_grad()
def gan_sample(pair: GanPair, n: int, seed: int) -> torch.Tensor:
    """``n`` point samples from a fixed seed; shape (n, d)."""
    generator = torch.Generator(device="cpu").manual_seed(seed)
    return pair.sample(n, generator)
