import numpy as np
import pytest
import torch

from osrsim.data import DataPart, DataSplit, SplitSpec
from osrsim.models import ModelConfig, build_classifier, build_gan


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(1234)
    yield


@pytest.fixture
def tiny_cfg():
    """Smallest config that still has 3 groups; fast enough for unit tests."""
    return ModelConfig(
        num_classes=6, in_channels=1, widths=(4, 6, 8), convs_per_group=1,
        z_dim=8, gan_width=4,
    )


@pytest.fixture
def small_cfg():
    """Paper-shaped config (three groups of three convs) at narrow widths."""
    return ModelConfig(num_classes=6, in_channels=1, widths=(8, 12, 16),
                       z_dim=16, gan_width=8)


def synthetic_split(num_known=3, n_train=64, n_test=32, n_open=24, seed=0,
                    channels=1):
    """A toy DataSplit with random images, labels already remapped."""
    rng = np.random.default_rng(seed)

    def images(n):
        return rng.standard_normal((n, channels, 32, 32)).astype(np.float32).clip(-1, 1)

    known = tuple(range(num_known))
    open_ = tuple(range(num_known, num_known + 2))
    spec = SplitSpec("auroc", "toy", 0, known, open_)
    closed_train = DataPart(images(n_train), rng.integers(0, num_known, n_train))
    closed_test = DataPart(images(n_test), rng.integers(0, num_known, n_test))
    open_labels = rng.choice(list(open_), n_open)
    open_test = DataPart(images(n_open), open_labels.astype(np.int64))
    return DataSplit(closed_train, closed_test, open_test, spec,
                     {c: c for c in known})


@pytest.fixture
def toy_split():
    return synthetic_split()


@pytest.fixture
def tiny_nets(tiny_cfg):
    classifier = build_classifier(tiny_cfg)
    copycat = build_classifier(tiny_cfg)
    generator, discriminator = build_gan(tiny_cfg)
    return classifier, copycat, generator, discriminator
