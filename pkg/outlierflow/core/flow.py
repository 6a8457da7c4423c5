"""Affine-coupling normalizing flow with exact log-likelihood.

Image mode stacks ActNorm + checkerboard/channel couplings with squeeze
operations between levels. Every conditioner is fully convolutional, so one
model can be evaluated and sampled at any resolution divisible by 2^levels.
Point mode uses the same machinery on flat vectors with MLP conditioners.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from outlierflow.core.errors import ConfigurationError, NumericError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
LN256 = math.log(256.0)


def _sum_per_sample(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).sum(1)


class FlowLayer(nn.Module):
    """Invertible layer. ``forward`` and ``inverse`` both return (output, logdet per sample)."""

    def inverse(self, y: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError


class LogitTransform(FlowLayer):
    """Maps [0, 1] data to the real line through logit(alpha + (1 - 2 alpha) x)."""

    def __init__(self, alpha: float = 0.05):
        super().__init__()
        self.alpha = alpha

    def forward(self, x):
        s = self.alpha + (1 - 2 * self.alpha) * x
        y = torch.log(s) - torch.log1p(-s)
        logdet = math.log(1 - 2 * self.alpha) - torch.log(s) - torch.log1p(-s)
        return y, _sum_per_sample(logdet)

    def inverse(self, y):
        s = torch.sigmoid(y)
        x = (s - self.alpha) / (1 - 2 * self.alpha)
        logdet = -math.log(1 - 2 * self.alpha) + F.logsigmoid(y) + F.logsigmoid(-y)
        return x, _sum_per_sample(logdet)


class ActNorm(FlowLayer):
    """Per-channel affine normalization, initialized from the first training batch."""

    def __init__(self, num_channels: int, spatial: bool = True):
        super().__init__()
        shape = (1, num_channels, 1, 1) if spatial else (1, num_channels)
        self.log_scale = nn.Parameter(torch.zeros(shape))
        self.bias = nn.Parameter(torch.zeros(shape))
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def initialize(self, x: torch.Tensor) -> None:
        dims = [d for d in range(x.dim()) if d != 1]
        mean = x.mean(dim=dims, keepdim=True)
        std = x.std(dim=dims, keepdim=True)
        self.bias.copy_(-mean)
        self.log_scale.copy_(-torch.log(std + 1e-6))
        self.initialized.fill_(True)

    def _positions(self, x: torch.Tensor) -> int:
        return x.shape[2] * x.shape[3] if x.dim() == 4 else 1

    def forward(self, x):
        if self.training and not bool(self.initialized):
            self.initialize(x)
        y = (x + self.bias) * torch.exp(self.log_scale)
        logdet = self.log_scale.sum() * self._positions(x)
        return y, logdet.expand(x.shape[0])

    def inverse(self, y):
        x = y * torch.exp(-self.log_scale) - self.bias
        logdet = -self.log_scale.sum() * self._positions(y)
        return x, logdet.expand(y.shape[0])


class Squeeze(FlowLayer):
    """(C, H, W) -> (4C, H/2, W/2) space-to-depth."""

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ConfigurationError(f"Cannot squeeze odd spatial size {h}x{w}")
        y = x.reshape(n, c, h // 2, 2, w // 2, 2).permute(0, 1, 3, 5, 2, 4)
        return y.reshape(n, c * 4, h // 2, w // 2), x.new_zeros(n)

    def inverse(self, y):
        n, c, h, w = y.shape
        x = y.reshape(n, c // 4, 2, 2, h, w).permute(0, 1, 4, 2, 5, 3)
        return x.reshape(n, c // 4, h * 2, w * 2), y.new_zeros(n)


def checkerboard(height: int, width: int, parity: int, like: torch.Tensor) -> torch.Tensor:
    rows = torch.arange(height, device=like.device).view(-1, 1)
    cols = torch.arange(width, device=like.device).view(1, -1)
    return ((rows + cols + parity) % 2).to(like.dtype).view(1, 1, height, width)


class AffineCoupling(FlowLayer):
    """y = x * exp(s(x_m)) + t(x_m) on the unmasked part; x_m is passed through.

    Scale outputs are squashed to (-bound, bound) by a scaled tanh. The last
    conditioner layer starts at zero, so a fresh coupling is the identity.
    """

    def __init__(self, channels: int, hidden: int, mask: str, parity: int, scale_bound: float = 2.0,
                 spatial: bool = True):
        super().__init__()
        if mask not in ("checkerboard", "channel", "alternate"):
            raise ConfigurationError(f"Unknown coupling mask {mask!r}")
        if mask == "channel" and channels < 2:
            raise ConfigurationError("Channel masks need at least two channels")
        self.channels = channels
        self.mask_kind = mask
        self.parity = parity
        self.scale_bound = scale_bound
        if spatial:
            self.net = nn.Sequential(
                nn.Conv2d(channels, hidden, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(hidden, hidden, 1),
                nn.ReLU(),
                nn.Conv2d(hidden, 2 * channels, 3, padding=1),
            )
        else:
            self.net = nn.Sequential(
                nn.Linear(channels, hidden),
                nn.ReLU(),
                nn.Linear(hidden, hidden),
                nn.ReLU(),
                nn.Linear(hidden, 2 * channels),
            )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def mask(self, x: torch.Tensor) -> torch.Tensor:
        if self.mask_kind == "checkerboard":
            return checkerboard(x.shape[2], x.shape[3], self.parity, x)
        keep = torch.zeros(self.channels, dtype=x.dtype, device=x.device)
        half = self.channels // 2
        if self.parity == 0:
            keep[:half] = 1
        else:
            keep[half:] = 1
        if self.mask_kind == "alternate":
            return keep.view(1, -1)
        return keep.view(1, -1, 1, 1)

    def _scale_shift(self, x_masked: torch.Tensor, mask: torch.Tensor):
        raw_s, t = self.net(x_masked).chunk(2, dim=1)
        log_s = self.scale_bound * torch.tanh(raw_s / self.scale_bound) * (1 - mask)
        return log_s, t * (1 - mask)

    def forward(self, x):
        mask = self.mask(x)
        log_s, t = self._scale_shift(x * mask, mask)
        return x * torch.exp(log_s) + t, _sum_per_sample(log_s)

    def inverse(self, y):
        mask = self.mask(y)
        log_s, t = self._scale_shift(y * mask, mask)
        return (y - t) * torch.exp(-log_s), -_sum_per_sample(log_s)


class FlowModel(nn.Module):
    """Normalizing flow with a fully factorized standard-normal prior."""

    def __init__(self, layers: Sequence[FlowLayer], channels: int, levels: int = 0, image_mode: bool = True):
        super().__init__()
        self.layers = nn.ModuleList(layers)
        self.channels = channels
        self.levels = levels
        self.image_mode = image_mode
        # Carries dtype and device for flows without parameters.
        self.register_buffer("_anchor", torch.zeros(()))

    @classmethod
    def for_images(cls, channels: int = 3, levels: int = 2, steps: int = 4, hidden: int = 32,
                   scale_bound: float = 2.0, alpha: float = 0.05) -> "FlowModel":
        layers: List[FlowLayer] = [LogitTransform(alpha)]
        c = channels
        for level in range(levels + 1):
            for step in range(steps):
                layers.append(ActNorm(c))
                layers.append(AffineCoupling(c, hidden, "checkerboard", step % 2, scale_bound))
                if level > 0:
                    layers.append(ActNorm(c))
                    layers.append(AffineCoupling(c, hidden, "channel", step % 2, scale_bound))
            if level < levels:
                layers.append(Squeeze())
                c *= 4
        return cls(layers, channels, levels, image_mode=True)

    @classmethod
    def for_points(cls, dim: int = 2, steps: int = 6, hidden: int = 64, scale_bound: float = 2.0) -> "FlowModel":
        layers: List[FlowLayer] = []
        for step in range(steps):
            layers.append(ActNorm(dim, spatial=False))
            layers.append(AffineCoupling(dim, hidden, "alternate", step % 2, scale_bound, spatial=False))
        return cls(layers, dim, 0, image_mode=False)

    @property
    def grid_unit(self) -> int:
        return 2 ** self.levels if self.image_mode else 1

    @property
    def initialized(self) -> bool:
        return all(bool(m.initialized) for m in self.modules() if isinstance(m, ActNorm))

    @torch.no_grad()
    def initialize(self, x: torch.Tensor) -> None:
        """Run one data-dependent initialization pass of every ActNorm layer."""
        was_training = self.training
        self.train()
        self.forward(x)
        self.train(was_training)

    def check_size(self, height: int, width: int) -> None:
        unit = self.grid_unit
        if height < unit or width < unit or height % unit or width % unit:
            raise ConfigurationError(f"Spatial size {height}x{width} must be a positive multiple of {unit}")

    def latent_shape(self, height: int, width: int) -> Tuple[int, int, int]:
        self.check_size(height, width)
        unit = self.grid_unit
        return self.channels * unit * unit, height // unit, width // unit

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """z = f(x) and ln|det dz/dx| per sample."""
        if self.image_mode:
            self.check_size(x.shape[-2], x.shape[-1])
        logdet = x.new_zeros(x.shape[0])
        for i, layer in enumerate(self.layers):
            x, ld = layer(x)
            logdet = logdet + ld
            if not torch.isfinite(x).all():
                raise NumericError("non-finite activation", where=f"layer {i} ({type(layer).__name__})")
        return x, logdet

    def inverse(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """x = f^-1(z) and ln|det dx/dz| per sample."""
        logdet = z.new_zeros(z.shape[0])
        for i in reversed(range(len(self.layers))):
            z, ld = self.layers[i].inverse(z)
            logdet = logdet + ld
            if not torch.isfinite(z).all():
                raise NumericError("non-finite activation", where=f"layer {i} ({type(self.layers[i]).__name__})")
        return z, logdet

    def log_prob(self, x: torch.Tensor, dequantize: bool = False,
                 generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """ln p(x) per sample. With ``dequantize`` 8-bit data gets uniform noise first."""
        if dequantize:
            noise = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device)
            x = (torch.round(x * 255.0) + noise) / 256.0
        z, logdet = self.forward(x)
        log_pz = -0.5 * _sum_per_sample(z ** 2) - 0.5 * LOG_2PI * z[0].numel()
        return log_pz + logdet

    def _prior_draw(self, shape, seed: Optional[int], generator: Optional[torch.Generator]) -> torch.Tensor:
        if generator is None and seed is not None:
            generator = torch.Generator(device="cpu").manual_seed(seed)
        z = torch.randn(shape, generator=generator, dtype=self._anchor.dtype)
        return z.to(self._anchor.device)

    def sample(self, height: int, width: int, n: int = 1, seed: Optional[int] = None,
               generator: Optional[torch.Generator] = None, temperature: float = 1.0) -> torch.Tensor:
        """Draw ``n`` images of exactly (channels, height, width), differentiable w.r.t. the parameters."""
        shape = self.latent_shape(height, width)
        z = self._prior_draw((n, *shape), seed, generator) * temperature
        x, _ = self.inverse(z)
        return x.clamp(0.0, 1.0)

    def sample_points(self, n: int, seed: Optional[int] = None,
                      generator: Optional[torch.Generator] = None, temperature: float = 1.0) -> torch.Tensor:
        """Draw ``n`` points; ``temperature`` scales the prior draw."""
        if self.image_mode:
            raise ConfigurationError("sample_points is only defined in point mode")
        if temperature <= 0:
            raise ConfigurationError(f"Sampling temperature must be positive, got {temperature}")
        x, _ = self.inverse(self._prior_draw((n, self.channels), seed, generator) * temperature)
        return x


def flow_forward(model: FlowModel, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return model(x)


def flow_inverse(model: FlowModel, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return model.inverse(z)


def flow_log_prob(model: FlowModel, x: torch.Tensor, dequantize: bool = False,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    return model.log_prob(x, dequantize=dequantize, generator=generator)


def flow_sample(model: FlowModel, height: int, width: int, seed: int) -> torch.Tensor:
    """One (channels, height, width) sample."""
    return model.sample(height, width, n=1, seed=seed)[0]


def bits_per_dim(model: FlowModel, batch: torch.Tensor, generator: Optional[torch.Generator] = None,
                 dequantize: bool = True) -> torch.Tensor:
    """Mean negative log2-likelihood per dimension.

    For images the data are 8-bit, so the 1/256 bin width of the dequantized
    density is added back; point batches are scored as continuous data.
    """
    dims = batch[0].numel()
    if model.image_mode:
        log_p = model.log_prob(batch, dequantize=dequantize, generator=generator)
        nll = -log_p + dims * LN256
    else:
        nll = -model.log_prob(batch)
    return (nll / (dims * math.log(2.0))).mean()
