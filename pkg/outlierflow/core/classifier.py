"""Dense classifiers producing per-pixel (or per-point) logits over K classes."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from outlierflow.core.errors import ConfigurationError


def _block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class SegmentationNet(nn.Module):
    """Three-level encoder-decoder with skip connections.

    Output spatial shape equals the input shape; input sides must be
    divisible by 4.
    """

    def __init__(self, num_classes: int, in_channels: int = 3, width: int = 32):
        super().__init__()
        if num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.enc1 = _block(in_channels, width)
        self.enc2 = _block(width, 2 * width)
        self.enc3 = _block(2 * width, 4 * width)
        self.up2 = nn.ConvTranspose2d(4 * width, 2 * width, 2, stride=2)
        self.dec2 = _block(4 * width, 2 * width)
        self.up1 = nn.ConvTranspose2d(2 * width, width, 2, stride=2)
        self.dec1 = _block(2 * width, width)
        self.head = nn.Conv2d(width, num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"Expected (N,{self.in_channels},H,W) input, got {tuple(x.shape)}"
            )
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ConfigurationError(f"Input size {x.shape[2]}x{x.shape[3]} must be divisible by 4")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)


class PointClassifier(nn.Module):
    """MLP over planar points, logits (N, K)."""

    def __init__(self, num_classes: int = 2, dim: int = 2, hidden: int = 64):
        super().__init__()
        self.num_classes = num_classes
        self.dim = dim
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, num_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 2 or x.shape[1] != self.dim:
            raise ConfigurationError(f"Expected (N,{self.dim}) points, got {tuple(x.shape)}")
        return self.net(x)


def forward_logits(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Logits (N, K, H, W) for images or (N, K) for points; accepts a single unbatched image."""
    single = x.dim() == 3
    logits = model(x.unsqueeze(0) if single else x)
    return logits[0] if single else logits


def predict_argmax(logits: torch.Tensor, dim: int = -3) -> torch.Tensor:
    """Closed-set ids; ties go to the lowest class id."""
    if logits.dim() == 2:
        dim = 1
    return torch.argmax(logits, dim=dim)


def max_logit(logits: torch.Tensor, dim: int = -3) -> torch.Tensor:
    if logits.dim() == 2:
        dim = 1
    return logits.max(dim=dim).values
