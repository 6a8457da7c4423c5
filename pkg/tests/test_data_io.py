import json
import struct

import numpy as np
import pytest
import torch
from PIL import Image

from outlierflow.core.data_io import (
    Calibration,
    ScoreMap,
    check_image,
    check_labels,
    load_manifest,
    load_split,
    read_disparity,
    read_image_png,
    read_label_png,
    read_score_map,
    tile_images,
    write_disparity_pgm,
    write_image_png,
    write_label_png,
    write_score_map,
)
from outlierflow.core.errors import ConfigurationError, FormatError, ManifestError


def test_score_map_layout(tmp_path):
    path = write_score_map(ScoreMap(np.array([[1.0, 2.0], [3.0, -0.5]])), tmp_path / "a.smap")
    data = path.read_bytes()
    assert len(data) == 12 + 16
    assert data[:4] == b"SMAP"
    assert struct.unpack("<II", data[4:12]) == (2, 2)
    assert struct.unpack("<4f", data[12:]) == (1.0, 2.0, 3.0, -0.5)


def test_score_map_keeps_width_and_height_apart(tmp_path):
    scores = np.arange(6, dtype=np.float32).reshape(2, 3)
    loaded = read_score_map(write_score_map(ScoreMap(scores), tmp_path / "b.smap"))
    assert (loaded.height, loaded.width) == (2, 3)
    np.testing.assert_array_equal(loaded.scores, scores)


def test_score_map_rejects_bad_files(tmp_path):
    bad_magic = tmp_path / "bad.smap"
    bad_magic.write_bytes(b"XMAP" + struct.pack("<II", 1, 1) + b"\0" * 4)
    with pytest.raises(FormatError):
        read_score_map(bad_magic)

    truncated = tmp_path / "short.smap"
    truncated.write_bytes(b"SMAP" + struct.pack("<II", 2, 2) + b"\0" * 8)
    with pytest.raises(FormatError):
        read_score_map(truncated)

    with pytest.raises(ConfigurationError):
        ScoreMap(np.array([[np.nan]]))
    with pytest.raises(ConfigurationError):
        ScoreMap(np.zeros(4))


def test_image_and_label_rasters(tmp_path):
    image = np.random.default_rng(0).random((6, 5, 3))
    restored = read_image_png(write_image_png(image, tmp_path / "img.png"))
    assert restored.shape == (6, 5, 3)
    np.testing.assert_allclose(restored, image, atol=1 / 255)

    labels = np.array([[0, 1], [255, 2]], dtype=np.uint8)
    np.testing.assert_array_equal(read_label_png(write_label_png(labels, tmp_path / "lab.png")), labels)

    write_image_png(image, tmp_path / "rgb.png")
    with pytest.raises(FormatError):
        read_label_png(tmp_path / "rgb.png")


def test_disparity_encoding(tmp_path):
    disparity = np.array([[0.0, 1.5], [3.25, 0.0]])
    path = write_disparity_pgm(disparity, tmp_path / "disp.pgm")
    assert path.read_bytes()[:2] == b"P5"
    with Image.open(path) as img:
        raw = np.asarray(img)
    assert raw[0, 1] == int(1.5 * 256) + 1
    np.testing.assert_allclose(read_disparity(path), disparity, atol=1 / 256)
    assert read_disparity(path)[0, 0] == 0.0


def test_calibration_depth():
    calibration = Calibration(focal_px=100.0, baseline_m=0.5)
    depth = calibration.depth(np.array([5.0, 0.0, -1.0]))
    assert depth[0] == pytest.approx(10.0)
    assert np.isinf(depth[1]) and np.isinf(depth[2])


def test_label_and_image_checks():
    check_labels(np.array([0, 1, 255]), 2, allow_outlier=False)
    check_labels(np.array([0, 2]), 2, allow_outlier=True)
    with pytest.raises(ConfigurationError):
        check_labels(np.array([0, 2]), 2, allow_outlier=False)
    with pytest.raises(ConfigurationError):
        check_image(torch.rand(8, 8))
    with pytest.raises(ConfigurationError):
        check_image(torch.full((3, 2, 2), float("inf")))


def _write_scene(root, name, label_value=0):
    (root / "img").mkdir(exist_ok=True)
    (root / "lab").mkdir(exist_ok=True)
    write_image_png(np.zeros((4, 4, 3)), root / "img" / name)
    write_label_png(np.full((4, 4), label_value, dtype=np.uint8), root / "lab" / name)
    return {"image": f"img/{name}", "label": f"lab/{name}"}


def _write_manifest(root, data):
    path = root / "manifest.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_manifest_loads_and_resolves_paths(tmp_path):
    entry = _write_scene(tmp_path, "a.png")
    manifest = load_manifest(_write_manifest(tmp_path, {"num_classes": 2, "splits": {"train": [entry]}}))
    assert manifest.outlier_id == 2
    split = load_split(manifest, "train")
    assert split.images.shape == (1, 3, 4, 4)
    assert split.labels.dtype == torch.int64
    assert split.names == ["a"]
    assert split.disparity is None


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "missing.json")

    (tmp_path / "broken.json").write_text("{", encoding="utf-8")
    with pytest.raises(FormatError):
        load_manifest(tmp_path / "broken.json")

    entry = _write_scene(tmp_path, "a.png")
    with pytest.raises(ConfigurationError):
        load_manifest(_write_manifest(tmp_path, {"num_classes": 1, "splits": {"train": [entry]}}))

    missing = {"image": "img/nope.png", "label": "lab/a.png"}
    with pytest.raises(ManifestError) as info:
        load_manifest(_write_manifest(tmp_path, {"num_classes": 2, "splits": {"train": [entry, missing]}}))
    assert info.value.entry == 1

    with_disparity = dict(entry, disparity="lab/a.png")
    with pytest.raises(ManifestError):
        load_manifest(_write_manifest(tmp_path, {"num_classes": 2, "splits": {"train": [with_disparity]}}))

    manifest = load_manifest(_write_manifest(tmp_path, {"num_classes": 2, "splits": {"train": [entry]}}))
    with pytest.raises(ManifestError):
        manifest.entries("val")


def test_training_split_rejects_outlier_id(tmp_path):
    entry = _write_scene(tmp_path, "b.png", label_value=2)
    manifest = load_manifest(_write_manifest(tmp_path, {"num_classes": 2, "splits": {"train": [entry],
                                                                                     "test": [entry]}}))
    with pytest.raises(ConfigurationError):
        load_split(manifest, "train")
    assert int(load_split(manifest, "test").labels.max()) == 2


def test_tile_images():
    tiles = [np.zeros((4, 5, 3), dtype=np.float32) for _ in range(6)]
    grid = tile_images(tiles, 2, 3, pad=1)
    assert grid.shape == (2 * 5 + 1, 3 * 6 + 1, 3)
    with pytest.raises(ConfigurationError):
        tile_images(tiles, 2, 2)
