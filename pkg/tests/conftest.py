import numpy as np
import pytest

from sydnet.backbone import write_features
from sydnet.config import load_config
from sydnet.data import SynthSpec, generate_synthetic, scan_dataset

import helpers

# Tiny scratch-mode setup: 36px renders cropped to 32, narrow backbone -> 1x1x8 maps.
TINY_IMAGE_SETTINGS = [
    "aug.source_size=36", "aug.crop_size=32", "backbone.widths=4,4,4,8,8", "train.batch_size=4",
    "patches.set=P12", "attention.c_a=4",
]


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthSpec(num_classes=3, samples_per_class=4, image_size=36, seed=3), root)
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dataset):
    return scan_dataset(tiny_dataset)


@pytest.fixture
def tiny_image_cfg(tiny_dataset):
    def make(*extra):
        return load_config(None, TINY_IMAGE_SETTINGS + [f"data.root={tiny_dataset}", *extra])
    return make


@pytest.fixture(scope="session")
def tiny_features(tmp_path_factory):
    """SYDF train/test files with 2x2x8 maps whose class sets the mean of one channel."""
    root = tmp_path_factory.mktemp("features")
    rng = np.random.default_rng(0)
    paths = []
    for split, n in (("train", 24), ("test", 9)):
        y = np.arange(n) % 3
        x = rng.normal(size=(n, 2, 2, 8)).astype(np.float32)
        x[np.arange(n), :, :, y] += 2.0
        path = root / f"{split}.sydf"
        write_features(path, x, y)
        paths.append(path)
    return tuple(paths)


@pytest.fixture
def tiny_feature_cfg(tiny_features):
    def make(*extra):
        return load_config(None, [
            "train.mode=frozen_features", "backbone.kind=imported", f"data.features_train={tiny_features[0]}",
            f"data.features_test={tiny_features[1]}", "train.batch_size=4", "attention.c_a=4", "patches.set=P12",
            *extra,
        ])
    return make


def pytest_terminal_summary(terminalreporter):
    if helpers.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(helpers.ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
