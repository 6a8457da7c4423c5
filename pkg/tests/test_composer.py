import numpy as np
import pytest
import torch

from outlierflow.core.composer import (
    MixedBatch,
    PatchSpec,
    compose,
    compose_batch,
    dump_composites,
    loss_masks,
    sample_patch_spec,
)
from outlierflow.core.data_io import IGNORE_ID
from outlierflow.core.errors import ConfigurationError


def test_sampled_patches_fit_and_follow_grid_unit():
    rng = np.random.default_rng(0)
    for _ in range(200):
        spec = sample_patch_spec(rng, (32, 48), (4, 30), unit=4)
        assert spec.fits((32, 48))
        assert spec.height % 4 == 0 and spec.width % 4 == 0
        assert 4 <= spec.height <= 30 and 4 <= spec.width <= 30


def test_patch_sides_are_independent():
    rng = np.random.default_rng(1)
    specs = [sample_patch_spec(rng, (64, 64), (8, 32)) for _ in range(50)]
    assert any(s.height != s.width for s in specs)


@pytest.mark.parametrize("patch_range, unit", [((5, 4), 1), ((4, 40), 1), ((2, 8), 4), ((0, 8), 1)])
def test_invalid_patch_ranges(patch_range, unit):
    with pytest.raises(ConfigurationError):
        sample_patch_spec(np.random.default_rng(0), (32, 32), patch_range, unit)


def test_compose_pastes_inside_mask_only():
    x_plus = torch.rand(3, 8, 10)
    patch = torch.rand(3, 3, 4, requires_grad=True)
    spec = PatchSpec(height=3, width=4, top=2, left=5)
    composed, mask, crop = compose(x_plus, patch, spec)

    rows, cols = spec.window()
    torch.testing.assert_close(composed[:, rows, cols], patch.detach())
    outside = mask == 0
    torch.testing.assert_close(composed[:, outside], x_plus[:, outside])
    assert int(mask.sum()) == spec.area
    torch.testing.assert_close(crop, x_plus[:, rows, cols])

    composed.sum().backward()
    torch.testing.assert_close(patch.grad, torch.ones_like(patch))


def test_compose_matches_mask_blend_exactly():
    rng = np.random.default_rng(7)
    generator = torch.Generator().manual_seed(7)
    for _ in range(100):
        h, w = int(rng.integers(4, 40)), int(rng.integers(4, 40))
        spec = sample_patch_spec(rng, (h, w), (1, min(h, w)))
        x_plus = torch.rand(3, h, w, generator=generator)
        patch = torch.rand(3, spec.height, spec.width, generator=generator)
        composed, mask, _ = compose(x_plus, patch, spec)
        x_minus = torch.zeros_like(x_plus)
        rows, cols = spec.window()
        x_minus[:, rows, cols] = patch
        assert torch.equal(composed, (1 - mask) * x_plus + mask * x_minus)


def test_compose_rejects_mismatched_patch():
    x_plus = torch.rand(3, 8, 8)
    with pytest.raises(ConfigurationError):
        compose(x_plus, torch.rand(3, 2, 2), PatchSpec(3, 3, 0, 0))
    with pytest.raises(ConfigurationError):
        compose(x_plus, torch.rand(3, 4, 4), PatchSpec(4, 4, 6, 0))


def test_batch_and_loss_masks():
    images = torch.rand(2, 3, 8, 8)
    labels = torch.zeros(2, 8, 8, dtype=torch.int64)
    labels[:, 0, :] = IGNORE_ID
    specs = [PatchSpec(2, 2, 0, 0), PatchSpec(4, 2, 3, 3)]
    patches = [torch.zeros(3, 2, 2), torch.zeros(3, 4, 2)]
    batch = compose_batch(images, patches, specs, labels)
    assert isinstance(batch, MixedBatch) and len(batch) == 2

    inlier, negative = loss_masks(batch)
    assert not (inlier & negative).any()
    assert int(negative[0].sum()) == 4 and int(negative[1].sum()) == 8
    assert not inlier[:, 0, :].any()
    # Labels inside the patch stay untouched.
    torch.testing.assert_close(batch.labels, labels)

    with pytest.raises(ConfigurationError):
        compose_batch(images, patches[:1], specs, labels)


def test_dump_composites(tmp_path):
    images = torch.rand(2, 3, 8, 8)
    batch = compose_batch(images, [torch.rand(3, 2, 2)] * 2, [PatchSpec(2, 2, 1, 1)] * 2)
    written = dump_composites(batch, tmp_path / "debug")
    assert len(written) == 4
    assert all(p.exists() for p in written)
