"""Shared fixtures: a tiny dataset, network and calibrated detector."""

import numpy as np
import pytest

from fuseguard.dataset import DatasetSpec, DatasetStore, Preprocessor, generate
from fuseguard.detector import calibrate
from fuseguard.model import Architecture, FusionNet

TINY_SIZE = 8


@pytest.fixture(scope="session")
def tiny_spec():
    return DatasetSpec(num_classes=3, samples_per_class=8, instances_per_class=4, image_size=TINY_SIZE)


@pytest.fixture(scope="session")
def tiny_splits(tiny_spec):
    train, test = generate(tiny_spec)
    return train, test, Preprocessor.fit(train)


@pytest.fixture(scope="session")
def tiny_inputs(tiny_splits):
    """Preprocessed ``(x_rgb, x_depth, labels, ids)`` per split."""
    train, test, pre = tiny_splits
    out = {}
    for name, split in (("train", train), ("test", test)):
        x_rgb, x_depth = pre.preprocess_batch(split)
        out[name] = (x_rgb, x_depth, split.labels, split.ids)
    return out


@pytest.fixture(scope="session")
def tiny_bounds(tiny_splits):
    return tiny_splits[2].bounds(TINY_SIZE)


@pytest.fixture(scope="session")
def tiny_arch():
    return Architecture(
        num_classes=3,
        image_size=TINY_SIZE,
        stage_channels=(4, 4, 4),
        projection_channels=4,
        projection_dim=6,
        memory=5,
    )


@pytest.fixture()
def tiny_net(tiny_arch):
    return FusionNet.initialize(tiny_arch, seed=0)


@pytest.fixture()
def tiny_detector(tiny_net, tiny_inputs):
    x_rgb, x_depth, labels, _ = tiny_inputs["train"]
    return calibrate(tiny_net, x_rgb, x_depth, labels, fpr=0.2)


@pytest.fixture()
def dataset_dir(tmp_path, tiny_spec, tiny_splits):
    """A saved tiny dataset directory."""
    train, test, pre = tiny_splits
    root = tmp_path / "data"
    DatasetStore(root).save(tiny_spec, train, test, pre)
    return root


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
