"""Finite-difference validation of every training loss on micro-networks.

Networks are set to eval mode so each loss is a pure function of the
parameters, and everything runs in double precision.
"""

import pytest
import torch

from osrsim.losses import (
    LossWeights,
    cross_entropy,
    discriminator_loss,
    generator_loss,
    imitation_loss,
    onehot,
    open_loss_copycat,
    open_loss_gan,
)
from osrsim.models import (
    REAL,
    FAKE,
    GroupIndexSets,
    ModelConfig,
    build_classifier,
    build_gan,
)

from gradcheck import check_loss_gradients, decondition

MICRO = ModelConfig(num_classes=3, in_channels=1, widths=(2, 3, 4),
                    convs_per_group=1, z_dim=3, gan_width=1)
IDX = GroupIndexSets.default(3)


@pytest.fixture(autouse=True)
def _double_precision():
    torch.set_default_dtype(torch.float64)
    torch.manual_seed(77)
    yield
    torch.set_default_dtype(torch.float32)


@pytest.fixture
def micro_classifier():
    return decondition(build_classifier(MICRO).double(), seed=11).eval()


@pytest.fixture
def micro_copycat():
    return decondition(build_classifier(MICRO).double(), seed=22).eval()


@pytest.fixture
def micro_gan():
    gen, disc = build_gan(MICRO)
    return (
        decondition(gen.double(), seed=33).eval(),
        decondition(disc.double(), seed=44).eval(),
    )


def _images(n=2):
    return torch.randn(n, 1, 32, 32, dtype=torch.float64).clamp(-1, 1)


def test_cross_entropy_gradients(micro_classifier):
    x = _images()
    labels = torch.tensor([0, 2])
    target = onehot(labels, 3)
    check_loss_gradients(
        lambda: cross_entropy(target, micro_classifier(x)), [micro_classifier]
    )


def test_imitation_loss_gradients(micro_classifier, micro_copycat):
    x = _images()
    with torch.no_grad():
        ref_feats = micro_classifier.features(x)
    check_loss_gradients(
        lambda: imitation_loss(micro_copycat.features(x), ref_feats, IDX),
        [micro_copycat],
    )


def test_discriminator_loss_gradients(micro_gan):
    _, disc = micro_gan
    x_real = _images(2)
    x_fake = _images(2)
    check_loss_gradients(
        lambda: discriminator_loss(disc(x_real), disc(x_fake)), [disc]
    )


def test_generator_loss_gradients(micro_classifier, micro_gan):
    gen, disc = micro_gan
    z = torch.randn(2, MICRO.z_dim, dtype=torch.float64)

    def loss():
        fake = gen(z)
        return generator_loss(disc(fake), micro_classifier(fake, bank=FAKE), beta=0.1)

    check_loss_gradients(loss, [gen], eps=1e-5)


def test_open_loss_copycat_gradients(micro_classifier, micro_copycat):
    x = _images()
    labels = torch.tensor([1, 2])
    w = LossWeights()
    with torch.no_grad():
        copy_feats = micro_copycat.features(x)

    def loss():
        probs = [
            micro_classifier.forward_from_group(i, copy_feats[i - 1], bank=REAL)
            for i in IDX.all
        ]
        return open_loss_copycat(probs, labels, IDX, w)

    check_loss_gradients(loss, [micro_classifier])


def test_open_loss_gan_gradients(micro_classifier):
    fake = _images(2)
    check_loss_gradients(
        lambda: open_loss_gan(micro_classifier(fake, bank=FAKE)), [micro_classifier]
    )


def test_micro_net_is_actually_micro(micro_classifier, micro_gan):
    from osrsim.models import count_parameters

    gen, disc = micro_gan
    assert count_parameters(micro_classifier) <= 1000
    assert count_parameters(gen) <= 1000
    assert count_parameters(disc) <= 1000
