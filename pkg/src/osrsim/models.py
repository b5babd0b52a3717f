"""Network definitions: the grouped CNN (classifier and its Copycat twin),
a small image generator/discriminator pair, and dual-bank batch normalization.

The backbone is a stack of convolutional groups followed by a linear head with
softmax. Group boundaries matter: intermediate group outputs are exposed so
feature batches can be re-injected into a sibling network at any boundary.
Batch-norm layers keep two running-statistic banks ("real" and "fake") with
shared affine parameters, so generated images never contaminate the statistics
used for real data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

REAL = "real"
FAKE = "fake"
BANKS = (REAL, FAKE)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture selection for all four networks."""

    num_classes: int
    in_channels: int = 1
    image_size: int = 32
    n_groups: int = 3
    convs_per_group: int = 3
    widths: tuple = (64, 128, 196)
    z_dim: int = 100
    gan_width: int = 64

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_groups < 1:
            raise ValueError("need at least 1 group")
        if len(self.widths) != self.n_groups:
            raise ValueError(f"widths {self.widths} must list one width per group")
        if self.image_size % (2 ** self.n_groups) != 0:
            raise ValueError("image_size must be divisible by 2**n_groups")
        object.__setattr__(self, "widths", tuple(self.widths))

    @property
    def input_spec(self):
        return (self.in_channels, self.image_size, self.image_size)

    def config_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class GroupIndexSets:
    """Partition of 1-based group indices into hard-fake and easy-fake producers.

    Easy groups sit at the end of the network; every hard index precedes every
    easy index, and together they cover 1..n exactly.
    """

    hard: tuple
    easy: tuple

    def __post_init__(self):
        object.__setattr__(self, "hard", tuple(self.hard))
        object.__setattr__(self, "easy", tuple(self.easy))
        n = self.count
        if set(self.hard) & set(self.easy):
            raise ValueError("hard and easy index sets overlap")
        if set(self.hard) | set(self.easy) != set(range(1, n + 1)):
            raise ValueError("hard and easy must partition 1..n")
        if not self.easy:
            raise ValueError("need at least one easy group")
        if max(self.easy) != n or any(h >= min(self.easy) for h in self.hard):
            raise ValueError("easy groups must come last")

    @property
    def count(self):
        return len(self.hard) + len(self.easy)

    @property
    def all(self):
        return tuple(range(1, self.count + 1))

    @classmethod
    def default(cls, n_groups):
        """All groups but the last produce hard fakes; the last produces easy ones."""
        return cls(hard=tuple(range(1, n_groups)), easy=(n_groups,))


class DualBatchNorm2d(nn.Module):
    """Batch norm with shared affine parameters and per-bank running statistics.

    A forward pass tagged with one bank reads and (in training mode) updates
    only that bank's running mean/var; the other bank is untouched.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        for bank in BANKS:
            self.register_buffer(f"mean_{bank}", torch.zeros(num_features))
            self.register_buffer(f"var_{bank}", torch.ones(num_features))

    def forward(self, x, bank=REAL):
        if bank not in BANKS:
            raise ValueError(f"unknown batch-norm bank {bank!r}")
        return F.batch_norm(
            x,
            getattr(self, f"mean_{bank}"),
            getattr(self, f"var_{bank}"),
            self.weight,
            self.bias,
            self.training,
            self.momentum,
            self.eps,
        )

    def extra_repr(self):
        return f"{self.num_features}, banks={BANKS}"


class ConvGroup(nn.Module):
    """A group of 3x3 conv blocks; the first conv halves the spatial size."""

    def __init__(self, in_channels, out_channels, n_convs, negative_slope=0.2):
        super().__init__()
        self.negative_slope = negative_slope
        convs, norms = [], []
        for j in range(n_convs):
            cin = in_channels if j == 0 else out_channels
            stride = 2 if j == 0 else 1
            convs.append(nn.Conv2d(cin, out_channels, 3, stride=stride, padding=1, bias=False))
            norms.append(DualBatchNorm2d(out_channels))
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)

    def forward(self, x, bank=REAL):
        for conv, norm in zip(self.convs, self.norms):
            x = F.leaky_relu(norm(conv(x), bank), self.negative_slope)
        return x


class GroupedNet(nn.Module):
    """Convolutional groups plus a softmax head; classifier and Copycat alike.

    Group indices are 1-based throughout the public API, matching the hard/easy
    index sets: ``features(x)[i - 1]`` is the output of group ``i`` and feeds
    ``forward_from_group(i, ...)``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        groups = []
        cin = cfg.in_channels
        for width in cfg.widths:
            groups.append(ConvGroup(cin, width, cfg.convs_per_group))
            cin = width
        self.groups = nn.ModuleList(groups)
        self.head = nn.Linear(cfg.widths[-1], cfg.num_classes)

    @property
    def n_groups(self):
        return self.cfg.n_groups

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.cfg.input_spec:
            raise ValueError(
                f"expected input of shape (B, {', '.join(map(str, self.cfg.input_spec))}), "
                f"got {tuple(x.shape)}"
            )

    def _expected_feature_shape(self, i):
        side = self.cfg.image_size // (2 ** i)
        return (self.cfg.widths[i - 1], side, side)

    def head_probs(self, h):
        """Final feature map -> class probabilities (global average pool, linear, softmax)."""
        pooled = h.mean(dim=(2, 3))
        return F.softmax(self.head(pooled), dim=-1)

    def pooled(self, h):
        """Final feature map -> penultimate (pre-head) feature vectors."""
        return h.mean(dim=(2, 3))

    def forward(self, x, bank=REAL):
        self._check_input(x)
        for group in self.groups:
            x = group(x, bank)
        return self.head_probs(x)

    def features(self, x, bank=REAL):
        """All n intermediate group outputs, group i at list position i - 1."""
        self._check_input(x)
        feats = []
        for group in self.groups:
            x = group(x, bank)
            feats.append(x)
        return feats

    def run_from_group(self, i, feats, bank=REAL):
        """Apply groups i+1..n to a group-i feature batch (head not applied)."""
        if not 1 <= i <= self.n_groups:
            raise ValueError(f"group index {i} out of range 1..{self.n_groups}")
        expected = self._expected_feature_shape(i)
        if feats.ndim != 4 or tuple(feats.shape[1:]) != expected:
            raise ValueError(
                f"group {i} features must have shape (B, {', '.join(map(str, expected))}), "
                f"got {tuple(feats.shape)}"
            )
        for group in self.groups[i:]:
            feats = group(feats, bank)
        return feats

    def forward_from_group(self, i, feats, bank=REAL):
        """Resume the composition at group i: apply groups i+1..n, then the head."""
        return self.head_probs(self.run_from_group(i, feats, bank))


class Generator(nn.Module):
    """Noise vector -> image, via four transposed-conv blocks; tanh keeps the
    output inside the normalized pixel range."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.image_size != 32:
            raise ValueError("generator topology assumes 32x32 images")
        self.cfg = cfg
        w = cfg.gan_width
        self.blocks = nn.Sequential(
            nn.ConvTranspose2d(cfg.z_dim, 4 * w, 4, 1, 0, bias=False),
            nn.BatchNorm2d(4 * w),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(4 * w, 2 * w, 4, 2, 1, bias=False),
            nn.BatchNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * w, w, 4, 2, 1, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(w, cfg.in_channels, 4, 2, 1, bias=False),
            nn.Tanh(),
        )

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.cfg.z_dim:
            raise ValueError(f"expected noise of shape (B, {self.cfg.z_dim}), got {tuple(z.shape)}")
        return self.blocks(z[:, :, None, None])


class Discriminator(nn.Module):
    """Image -> probability of being real, via four stride-2 conv blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.image_size != 32:
            raise ValueError("discriminator topology assumes 32x32 images")
        self.cfg = cfg
        w = cfg.gan_width
        self.blocks = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w, 4, 2, 1, bias=False),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, 2, 1, bias=False),
            nn.BatchNorm2d(2 * w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1, bias=False),
            nn.BatchNorm2d(4 * w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * w, 1, 4, 1, 0, bias=False),
            nn.Sigmoid(),
        )

    def forward(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.cfg.input_spec:
            raise ValueError(
                f"expected images of shape (B, {', '.join(map(str, self.cfg.input_spec))}), "
                f"got {tuple(x.shape)}"
            )
        return self.blocks(x).view(-1)


def init_weights(module):
    """Conv and linear weights ~ N(0, 0.02); batch-norm affine starts at (1, 0)."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.BatchNorm2d, DualBatchNorm2d)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_classifier(cfg):
    net = GroupedNet(cfg)
    net.apply(init_weights)
    return net


def build_gan(cfg):
    gen = Generator(cfg)
    gen.apply(init_weights)
    disc = Discriminator(cfg)
    disc.apply(init_weights)
    return gen, disc


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())
