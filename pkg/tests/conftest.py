import pytest
import torch

from outlierflow.core.data_io import load_split
from outlierflow.core.options import RunConfig
from outlierflow.core.shapes import generate_shapes_dataset


def make_tiny_config(**overrides) -> RunConfig:
    """Smallest config that still exercises every stage on CPU in seconds."""
    values = dict(
        seed=3,
        num_classes=3,
        image_size=64,
        n_train=4,
        n_test=2,
        flow_levels=1,
        flow_steps=1,
        flow_hidden=8,
        classifier_width=4,
        batch_size=2,
        cls_epochs=1,
        flow_epochs=1,
        joint_epochs=1,
        crop_size=16,
        patch_min=8,
        patch_max=16,
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture
def tiny_config() -> RunConfig:
    return make_tiny_config()


@pytest.fixture(scope="session")
def shapes_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    return generate_shapes_dataset(root, seed=3, n_train=4, n_test=2, num_classes=3, image_size=64, flow_levels=1)


@pytest.fixture(scope="session")
def train_split(shapes_manifest):
    return load_split(shapes_manifest, "train")


@pytest.fixture(scope="session")
def test_split(shapes_manifest):
    return load_split(shapes_manifest, "test")


@pytest.fixture
def torch_generator():
    return torch.Generator().manual_seed(0)
