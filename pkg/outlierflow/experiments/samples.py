"""Tiled sample grids from a trained flow."""

from pathlib import Path
from typing import Tuple, Union

import torch

from outlierflow.core.data_io import image_to_hwc, tile_images, write_image_png
from outlierflow.core.errors import ConfigurationError
from outlierflow.core.flow import FlowModel


@torch.no_grad()
def sample_grid(
    flow: FlowModel,
    rows: int,
    cols: int,
    hw: Tuple[int, int],
    seed: int,
    path: Union[str, Path],
    temperature: float = 1.0,
) -> Path:
    """Write a rows x cols PNG of flow samples at resolution ``hw``."""
    if rows < 1 or cols < 1:
        raise ConfigurationError("Sample grid needs at least one row and one column")
    height, width = hw
    was_training = flow.training
    flow.eval()
    try:
        samples = flow.sample(height, width, n=rows * cols, seed=seed, temperature=temperature)
    finally:
        flow.train(was_training)
    tiles = [image_to_hwc(x) for x in samples]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return write_image_png(tile_images(tiles, rows, cols), path)
