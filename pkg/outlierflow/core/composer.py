"""Mixed-content images: a synthetic negative patch pasted atop an inlier image."""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from outlierflow.core.data_io import IGNORE_ID, image_to_hwc, write_image_png
from outlierflow.core.errors import ConfigurationError


@dataclass(frozen=True)
class PatchSpec:
    height: int
    width: int
    top: int
    left: int

    def fits(self, image_hw: Tuple[int, int]) -> bool:
        h, w = image_hw
        return (
            self.height > 0
            and self.width > 0
            and 0 <= self.top
            and 0 <= self.left
            and self.top + self.height <= h
            and self.left + self.width <= w
        )

    @property
    def area(self) -> int:
        return self.height * self.width

    def window(self) -> Tuple[slice, slice]:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)


def sample_patch_spec(
    rng: np.random.Generator,
    image_hw: Tuple[int, int],
    patch_range: Tuple[int, int],
    unit: int = 1,
) -> PatchSpec:
    """Height and width drawn independently from U{a..b}, rounded down to ``unit``;
    the location is uniform over positions keeping the patch inside the image."""
    a, b = patch_range
    h, w = image_hw
    if not 1 <= a <= b:
        raise ConfigurationError(f"Invalid patch range [{a}, {b}]")
    if b > min(h, w):
        raise ConfigurationError(f"Patch range [{a}, {b}] does not fit a {h}x{w} image")
    if a < unit:
        raise ConfigurationError(f"Smallest patch side {a} is below the flow grid unit {unit}")
    ph = int(rng.integers(a, b + 1)) // unit * unit
    pw = int(rng.integers(a, b + 1)) // unit * unit
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    return PatchSpec(ph, pw, top, left)


@dataclass
class MixedBatch:
    """Composed images x', paste masks s, replaced inlier crops x^c and untouched labels."""

    images: torch.Tensor  # (N, C, H, W)
    masks: torch.Tensor  # (N, H, W) float, 1 inside the pasted patch
    crops: List[torch.Tensor]  # per image (C, h, w)
    labels: Optional[torch.Tensor]  # (N, H, W) int64
    specs: List[PatchSpec]

    def __len__(self) -> int:
        return self.images.shape[0]


def paste_mask(spec: PatchSpec, image_hw: Tuple[int, int], like: torch.Tensor) -> torch.Tensor:
    mask = torch.zeros(image_hw, dtype=like.dtype, device=like.device)
    rows, cols = spec.window()
    mask[rows, cols] = 1
    return mask


def compose(x_plus: torch.Tensor, patch: torch.Tensor, spec: PatchSpec):
    """x' = (1 - s) * x+ + pad(patch, s) for one (C, H, W) image.

    Returns (x', s, x^c). Gradients reach ``patch`` through the masked pixels.
    """
    if x_plus.dim() != 3 or patch.dim() != 3:
        raise ConfigurationError("compose expects (C,H,W) image and patch")
    c, h, w = x_plus.shape
    if patch.shape != (c, spec.height, spec.width):
        raise ConfigurationError(
            f"Patch shape {tuple(patch.shape)} does not match spec {(c, spec.height, spec.width)}"
        )
    if not spec.fits((h, w)):
        raise ConfigurationError(f"{spec} does not fit a {h}x{w} image")
    s = paste_mask(spec, (h, w), x_plus)
    padded = F.pad(patch, (spec.left, w - spec.left - spec.width, spec.top, h - spec.top - spec.height))
    composed = (1 - s) * x_plus + padded
    rows, cols = spec.window()
    crop = x_plus[:, rows, cols]
    return composed, s, crop


def compose_batch(
    x_plus: torch.Tensor,
    patches: Sequence[torch.Tensor],
    specs: Sequence[PatchSpec],
    labels: Optional[torch.Tensor] = None,
) -> MixedBatch:
    """One pasted patch per image."""
    if len(patches) != x_plus.shape[0] or len(specs) != x_plus.shape[0]:
        raise ConfigurationError("Need exactly one patch and one spec per image")
    images, masks, crops = [], [], []
    for image, patch, spec in zip(x_plus, patches, specs):
        composed, s, crop = compose(image, patch, spec)
        images.append(composed)
        masks.append(s)
        crops.append(crop)
    return MixedBatch(torch.stack(images), torch.stack(masks), crops, labels, list(specs))


def loss_masks(batch: MixedBatch, ignore_id: int = IGNORE_ID) -> Tuple[torch.Tensor, torch.Tensor]:
    """(inlier pixels supervised by cross-entropy, pasted pixels supervised by L_neg)."""
    negative = batch.masks > 0.5
    inlier = ~negative
    if batch.labels is not None:
        inlier = inlier & (batch.labels != ignore_id)
    return inlier, negative


def dump_composites(batch: MixedBatch, out_dir: Union[str, Path], prefix: str = "mixed") -> List[Path]:
    """Write each composed image and its mask as PNG for visual inspection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(len(batch)):
        image_path = out_dir / f"{prefix}_{i:03d}.png"
        mask_path = out_dir / f"{prefix}_{i:03d}_mask.png"
        write_image_png(image_to_hwc(batch.images[i]), image_path)
        mask = batch.masks[i].detach().cpu().numpy()
        write_image_png(np.repeat(mask[..., None], 3, axis=-1), mask_path)
        written.extend([image_path, mask_path])
    return written
