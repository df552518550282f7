import numpy as np
import pytest
import torch

from fsdet.backbone import FeatureMap
from fsdet.fixtures import FixtureSpec, generate_fixture
from fsdet.ingest import load_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def shapes_root(tmp_path_factory):
    """Small deterministic shapes dataset shared by the whole session."""
    root = tmp_path_factory.mktemp("data") / "shapes"
    generate_fixture(
        FixtureSpec(n_classes=4, n_images=12, image_size=128,
                    objects_per_image=(1, 2), seed=11),
        root,
    )
    return root


@pytest.fixture(scope="session")
def shapes_dataset(shapes_root):
    vocab, images = load_dataset(shapes_root)
    return vocab, images


@pytest.fixture(scope="session")
def shapes_dataset_big(tmp_path_factory):
    """Enough annotations per class for k up to 10."""
    root = tmp_path_factory.mktemp("data") / "shapes_big"
    generate_fixture(
        FixtureSpec(n_classes=4, n_images=32, image_size=128,
                    objects_per_image=(1, 3), seed=23),
        root,
    )
    vocab, images = load_dataset(root)
    return vocab, images


def make_feature_map(values, stride=16, image_size=None):
    t = torch.as_tensor(values, dtype=torch.float32)
    if image_size is None:
        image_size = (t.shape[1] * stride, t.shape[2] * stride)
    return FeatureMap(values=t, stride=stride, image_size=image_size)
