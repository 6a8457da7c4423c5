"""Seeded synthetic scenes: textured sky/ground backgrounds with colored objects.

Class 0 is sky, class 1 is ground, classes 2..K-1 are object categories. The
test split additionally contains one object of a held-out category per image,
labeled with the outlier id K. Object outlines are labeled ignore (255).
"""

import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from outlierflow.core.data_io import (
    IGNORE_ID,
    Calibration,
    DatasetManifest,
    ManifestEntry,
    load_manifest,
    write_disparity_pgm,
    write_image_png,
    write_label_png,
)
from outlierflow.core.errors import ConfigurationError

logger = logging.getLogger(__name__)

# (shape, RGB) for inlier object categories 2, 3, ...
OBJECT_STYLES: List[Tuple[str, Tuple[int, int, int]]] = [
    ("circle", (220, 40, 40)),
    ("square", (240, 200, 30)),
    ("diamond", (30, 200, 220)),
    ("bar", (240, 130, 20)),
    ("ring", (250, 250, 250)),
]
# Outliers are triangles filled with per-pixel uniform RGB noise; the color only seeds the outline.
OUTLIER_STYLE: Tuple[str, Tuple[int, int, int]] = ("triangle", (200, 40, 220))

MIN_DISPARITY = 0.4
MAX_DISPARITY = 4.0


def _shape_polygon(shape: str, cx: float, cy: float, r: float) -> Optional[List[Tuple[float, float]]]:
    if shape == "square":
        return [(cx - r, cy - r), (cx + r, cy - r), (cx + r, cy + r), (cx - r, cy + r)]
    if shape == "diamond":
        return [(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)]
    if shape == "bar":
        return [(cx - r, cy - r / 3), (cx + r, cy - r / 3), (cx + r, cy + r / 3), (cx - r, cy + r / 3)]
    if shape == "triangle":
        return [(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)]
    return None


def _draw_object(image: Optional[ImageDraw.ImageDraw], label: ImageDraw.ImageDraw, shape: str, color,
                 class_id: int, cx: float, cy: float, r: float) -> None:
    polygon = _shape_polygon(shape, cx, cy, r)
    box = [cx - r, cy - r, cx + r, cy + r]
    if polygon is not None:
        if image is not None:
            image.polygon(polygon, fill=color)
        label.polygon(polygon, fill=class_id, outline=IGNORE_ID)
    elif shape == "ring":
        width = max(2, int(r / 2))
        if image is not None:
            image.ellipse(box, outline=color, width=width)
        label.ellipse(box, outline=class_id, width=width)
        label.ellipse(box, outline=IGNORE_ID, width=1)
    else:
        if image is not None:
            image.ellipse(box, fill=color)
        label.ellipse(box, fill=class_id, outline=IGNORE_ID)


def _background(rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray, int]:
    """Textured sky over ground, returns (image HxWx3, labels HxW, horizon row)."""
    horizon = int(rng.integers(int(0.3 * size), int(0.5 * size) + 1))
    rows = np.arange(size, dtype=np.float32)[:, None]
    image = np.zeros((size, size, 3), dtype=np.float32)

    sky_top = np.array([0.25, 0.45, 0.85]) + rng.uniform(-0.05, 0.05, 3)
    sky_bottom = np.array([0.65, 0.8, 0.95]) + rng.uniform(-0.05, 0.05, 3)
    t = np.clip(rows / max(horizon, 1), 0, 1)[..., None]
    sky = (1 - t) * sky_top + t * sky_bottom
    image[:horizon] = np.broadcast_to(sky[:horizon], (horizon, size, 3))

    ground_base = np.array([0.35, 0.5, 0.2]) + rng.uniform(-0.05, 0.05, 3)
    stripes = 0.06 * np.sin(rows[horizon:] * rng.uniform(0.6, 1.2) + rng.uniform(0, np.pi))
    image[horizon:] = ground_base + stripes[..., None]

    image += rng.normal(0.0, 0.03, image.shape)
    labels = np.ones((size, size), dtype=np.uint8)
    labels[:horizon] = 0
    return np.clip(image, 0, 1), labels, horizon


def _disparity(size: int, horizon: int) -> np.ndarray:
    """Ground-plane disparity growing linearly from the horizon to the bottom row; sky invalid."""
    disparity = np.zeros((size, size), dtype=np.float64)
    span = max(size - 1 - horizon, 1)
    for row in range(horizon, size):
        disparity[row] = MIN_DISPARITY + (MAX_DISPARITY - MIN_DISPARITY) * (row - horizon) / span
    return disparity


def render_scene(rng: np.random.Generator, size: int, num_classes: int, with_outlier: bool):
    """Render one scene, returning (image, labels, disparity)."""
    image, labels, horizon = _background(rng, size)
    disparity = _disparity(size, horizon)

    canvas = Image.fromarray(np.round(image * 255).astype(np.uint8))
    label_img = Image.fromarray(labels)
    draw_image, draw_label = ImageDraw.Draw(canvas), ImageDraw.Draw(label_img)

    objects = []
    categories = list(range(2, num_classes))
    if categories:
        for _ in range(int(rng.integers(1, 4))):
            class_id = int(rng.choice(categories))
            objects.append((class_id, OBJECT_STYLES[class_id - 2]))
    if with_outlier:
        objects.append((num_classes, OUTLIER_STYLE))

    object_masks = []
    for class_id, (shape, color) in objects:
        r = float(rng.uniform(size / 16, size / 7))
        cx = float(rng.uniform(r, size - 1 - r))
        cy = float(rng.uniform(max(horizon, r), size - 1 - r))
        jitter = tuple(int(np.clip(c + rng.integers(-20, 21), 0, 255)) for c in color)
        _draw_object(draw_image, draw_label, shape, jitter, class_id, cx, cy, r)
        mask = Image.new("L", (size, size), 0)
        _draw_object(None, ImageDraw.Draw(mask), shape, None, 1, cx, cy, r)
        base_row = int(min(size - 1, cy + r))
        object_masks.append((np.asarray(mask) > 0, disparity[base_row, 0], class_id == num_classes))

    image = np.asarray(canvas, dtype=np.float32) / 255.0
    for mask, _, is_outlier in object_masks:
        if is_outlier:
            image[mask] = rng.uniform(0.0, 1.0, (int(mask.sum()), 3)).astype(np.float32)
    labels = np.asarray(label_img, dtype=np.uint8).copy()
    # Objects stand upright, so they share the disparity of their ground contact row.
    for mask, value, _ in object_masks:
        disparity[mask] = value
    return image, labels, disparity


def generate_shapes_dataset(
    out_dir: Union[str, Path],
    seed: int,
    n_train: int,
    n_test: int,
    num_classes: int = 3,
    image_size: int = 64,
    flow_levels: int = 2,
    calibration: Optional[Calibration] = None,
) -> DatasetManifest:
    """Write train/test PNGs plus ``manifest.json`` and return the loaded manifest.

    The output is a pure function of the arguments.
    """
    if num_classes < 2:
        raise ConfigurationError("num_classes must be at least 2")
    if num_classes - 2 > len(OBJECT_STYLES):
        raise ConfigurationError(f"At most {len(OBJECT_STYLES) + 2} classes are supported")
    if image_size % (2 ** flow_levels):
        raise ConfigurationError(f"image_size {image_size} is not divisible by 2^{flow_levels}")
    if image_size < 16:
        raise ConfigurationError("image_size must be at least 16")
    if n_train < 0 or n_test < 0:
        raise ConfigurationError("Split sizes must be non-negative")

    calibration = calibration or Calibration(focal_px=100.0, baseline_m=0.2)
    out_dir = Path(out_dir)
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)

    splits = {}
    for split, count, seq, with_outlier in (
        ("train", n_train, train_seq, False),
        ("test", n_test, test_seq, True),
    ):
        rng = np.random.default_rng(seq)
        for sub in ("images", "labels", "disparity"):
            (out_dir / split / sub).mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(count):
            image, labels, disparity = render_scene(rng, image_size, num_classes, with_outlier)
            name = f"{i:05d}.png"
            entry = ManifestEntry(
                image=f"{split}/images/{name}",
                label=f"{split}/labels/{name}",
                disparity=f"{split}/disparity/{i:05d}.pgm",
            )
            write_image_png(image, out_dir / entry.image)
            write_label_png(labels, out_dir / entry.label)
            write_disparity_pgm(disparity, out_dir / entry.disparity)
            entries.append(entry)
        splits[split] = entries
        logger.info("Wrote %d %s scenes to %s", count, split, out_dir / split)

    manifest = DatasetManifest(root=out_dir, num_classes=num_classes, splits=splits, calibration=calibration)
    manifest.save(out_dir / "manifest.json")
    return load_manifest(out_dir / "manifest.json")
