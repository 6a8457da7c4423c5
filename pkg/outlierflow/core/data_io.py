"""Raster I/O, score-map files and dataset manifests."""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch
from PIL import Image

from outlierflow.core.errors import ConfigurationError, FormatError, ManifestError

IGNORE_ID = 255
SMAP_MAGIC = b"SMAP"
_SMAP_HEADER = struct.Struct("<4sII")

PathLike = Union[str, Path]


@dataclass
class ScoreMap:
    """Per-pixel anomaly scores stored as 32-bit floats."""

    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 2:
            raise ConfigurationError(f"ScoreMap must be 2-D, got shape {self.scores.shape}")
        if not np.isfinite(self.scores).all():
            raise ConfigurationError("ScoreMap contains non-finite values")

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


def write_score_map(score_map: ScoreMap, path: PathLike) -> Path:
    """Write ``SMAP`` + little-endian u32 width, height + row-major little-endian f32."""
    path = Path(path)
    header = _SMAP_HEADER.pack(SMAP_MAGIC, score_map.width, score_map.height)
    body = np.ascontiguousarray(score_map.scores, dtype="<f4").tobytes()
    path.write_bytes(header + body)
    return path


def read_score_map(path: PathLike) -> ScoreMap:
    data = Path(path).read_bytes()
    if len(data) < _SMAP_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, width, height = _SMAP_HEADER.unpack_from(data)
    if magic != SMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _SMAP_HEADER.size + 4 * width * height
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    scores = np.frombuffer(data, dtype="<f4", offset=_SMAP_HEADER.size).reshape(height, width)
    return ScoreMap(scores.astype(np.float32))


# Rasters


def check_image(x: torch.Tensor) -> torch.Tensor:
    """Validate an ImageTensor (C, H, W) or a batch of them."""
    if x.dim() not in (3, 4):
        raise ConfigurationError(f"Expected (C,H,W) or (N,C,H,W) image, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ConfigurationError("Image contains non-finite values")
    return x


def check_labels(labels: np.ndarray, num_classes: int, allow_outlier: bool) -> np.ndarray:
    """Validate a LabelMap against the id set {0..K-1} (+K when allowed) and 255."""
    ids = np.unique(labels)
    allowed = set(range(num_classes)) | {IGNORE_ID}
    if allow_outlier:
        allowed.add(num_classes)
    bad = [int(i) for i in ids if int(i) not in allowed]
    if bad:
        raise ConfigurationError(f"Label ids {bad} outside the allowed set")
    return labels


def write_image_png(image: np.ndarray, path: PathLike) -> Path:
    """Save an (H, W, 3) float image in [0, 1] as 8-bit RGB PNG."""
    array = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(array).save(path, format="PNG")
    return Path(path)


def read_image_png(path: PathLike) -> np.ndarray:
    """Load an image as (H, W, 3) float32 in [0, 1]."""
    with Image.open(path) as img:
        if img.mode != "RGB":
            img = img.convert("RGB")
        return np.asarray(img, dtype=np.float32) / 255.0


def write_label_png(labels: np.ndarray, path: PathLike) -> Path:
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path, format="PNG")
    return Path(path)


def read_label_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise FormatError(f"{path}: label raster must be single-channel 8-bit, got {img.mode}")
        return np.asarray(img, dtype=np.uint8)


def write_disparity_pgm(disparity: np.ndarray, path: PathLike) -> Path:
    """16-bit binary PGM: value = disparity * 256 + 1, 0 marks invalid pixels."""
    disparity = np.asarray(disparity, dtype=np.float64)
    encoded = np.where(disparity > 0, np.round(disparity * 256.0) + 1, 0)
    Image.fromarray(np.clip(encoded, 0, 65535).astype(np.int32)).save(path, format="PPM")
    return Path(path)


def read_disparity(path: PathLike) -> np.ndarray:
    """Decode a 16-bit PNG or PGM disparity raster; invalid pixels become 0."""
    with Image.open(path) as img:
        raw = np.asarray(img).astype(np.float64)
    return np.where(raw > 0, (raw - 1.0) / 256.0, 0.0)


# Manifests


@dataclass
class Calibration:
    focal_px: float
    baseline_m: float

    def depth(self, disparity: np.ndarray) -> np.ndarray:
        """Metric depth per pixel; nonpositive disparity maps to +inf."""
        disparity = np.asarray(disparity, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return np.where(disparity > 0, self.focal_px * self.baseline_m / disparity, np.inf)


@dataclass
class ManifestEntry:
    image: str
    label: str
    disparity: Optional[str] = None


@dataclass
class DatasetManifest:
    """Splits of (image, label, optional disparity) paths relative to ``root``."""

    root: Path
    num_classes: int
    splits: Dict[str, List[ManifestEntry]] = field(default_factory=dict)
    calibration: Optional[Calibration] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("DatasetManifest needs at least 2 classes")

    def entries(self, split: str) -> List[ManifestEntry]:
        if split not in self.splits:
            raise ManifestError(f"split {split!r} not in manifest (have {sorted(self.splits)})")
        return self.splits[split]

    def path(self, relative: str) -> Path:
        return self.root / relative

    @property
    def outlier_id(self) -> int:
        return self.num_classes

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "calibration": (
                {"focal_px": self.calibration.focal_px, "baseline_m": self.calibration.baseline_m}
                if self.calibration
                else None
            ),
            "splits": {
                name: [
                    {"image": e.image, "label": e.label, "disparity": e.disparity} for e in entries
                ]
                for name, entries in self.splits.items()
            },
        }

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def load_manifest(path: PathLike) -> DatasetManifest:
    """Read and validate a JSON manifest; paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e}") from e

    num_classes = data.get("num_classes")
    if not isinstance(num_classes, int) or num_classes < 2:
        raise ConfigurationError(f"{path}: num_classes must be an integer >= 2, got {num_classes!r}")

    calibration = None
    if data.get("calibration"):
        try:
            calibration = Calibration(
                focal_px=float(data["calibration"]["focal_px"]),
                baseline_m=float(data["calibration"]["baseline_m"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"malformed calibration: {e}") from e

    root = path.parent
    splits: Dict[str, List[ManifestEntry]] = {}
    index = 0
    for split, raw_entries in (data.get("splits") or {}).items():
        entries = []
        for raw in raw_entries:
            if not isinstance(raw, dict) or "image" not in raw or "label" not in raw:
                raise ManifestError(f"malformed entry in split {split!r}: {raw!r}", entry=index)
            entry = ManifestEntry(raw["image"], raw["label"], raw.get("disparity"))
            for kind, relative in (("image", entry.image), ("label", entry.label), ("disparity", entry.disparity)):
                if relative is not None and not (root / relative).exists():
                    raise ManifestError(f"{kind} file missing: {relative}", entry=index)
            if entry.disparity is not None and calibration is None:
                raise ManifestError("disparity given without calibration", entry=index)
            entries.append(entry)
            index += 1
        splits[split] = entries

    return DatasetManifest(root=root, num_classes=num_classes, splits=splits, calibration=calibration)


@dataclass
class SplitData:
    """A split loaded into memory."""

    images: torch.Tensor  # (N, 3, H, W) float32 in [0, 1]
    labels: torch.Tensor  # (N, H, W) int64
    disparity: Optional[np.ndarray] = None  # (N, H, W) float64, 0 = invalid
    names: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


def load_split(manifest: DatasetManifest, split: str, allow_outlier: Optional[bool] = None) -> SplitData:
    """Read every raster of a split. Training splits must not contain the outlier id."""
    entries = manifest.entries(split)
    if not entries:
        raise ManifestError(f"split {split!r} is empty")
    if allow_outlier is None:
        allow_outlier = split != "train"

    images, labels, disparities, names = [], [], [], []
    for i, entry in enumerate(entries):
        image = read_image_png(manifest.path(entry.image))
        label = read_label_png(manifest.path(entry.label))
        if image.shape[:2] != label.shape:
            raise ManifestError(f"image and label shapes differ: {image.shape[:2]} vs {label.shape}", entry=i)
        check_labels(label, manifest.num_classes, allow_outlier)
        images.append(torch.from_numpy(image.transpose(2, 0, 1).copy()))
        labels.append(torch.from_numpy(label.astype(np.int64)))
        if entry.disparity is not None:
            disparities.append(read_disparity(manifest.path(entry.disparity)))
        names.append(Path(entry.image).stem)

    disparity = np.stack(disparities) if len(disparities) == len(entries) else None
    return SplitData(torch.stack(images), torch.stack(labels), disparity, names)


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(data: dict, path: PathLike) -> Path:
    """Write ``data`` as strict JSON; NaN and infinite floats become null."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_json_safe(data), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def image_to_hwc(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) tensor to (H, W, C) numpy array for saving."""
    return x.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()


def tile_images(images: List[np.ndarray], rows: int, cols: int, pad: int = 2) -> np.ndarray:
    """Tile equally sized (H, W, 3) images into one grid image with white padding."""
    if rows < 1 or cols < 1:
        raise ConfigurationError("Grid needs at least one row and one column")
    if len(images) != rows * cols:
        raise ConfigurationError(f"Need {rows * cols} images, got {len(images)}")
    h, w = images[0].shape[:2]
    grid = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), dtype=np.float32)
    for idx, img in enumerate(images):
        r, c = divmod(idx, cols)
        top, left = pad + r * (h + pad), pad + c * (w + pad)
        grid[top : top + h, left : left + w] = img
    return grid
