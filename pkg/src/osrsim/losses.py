"""Scalar training objectives and target-distribution construction.

Every loss is a pure function of probability/feature tensors. Probabilities
arriving here are already softmax outputs; logs are clamped at 1e-12 so a
saturated prediction cannot produce an infinite loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

LOG_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Scale factors of the joint objective.

    lam scales the open-set term of the classifier loss, beta scales the
    generator's classifier-awareness term, and the alphas are the label
    smoothing ratios used for hard and easy fake targets.
    """

    lam: float = 0.1
    beta: float = 0.1
    alpha_hard: float = 0.5
    alpha_easy: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be nonnegative")
        for name in ("alpha_hard", "alpha_easy"):
            a = getattr(self, name)
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {a}")


def _clamped_log(probs):
    return torch.log(probs.clamp(min=LOG_EPS))


def onehot(labels, num_classes):
    """Class indices -> one-hot rows; a scalar gives a single (K,) vector."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("label outside 0..K-1")
    return torch.eye(num_classes, dtype=torch.get_default_dtype())[labels]


def uniform_target(num_classes, batch_size=1):
    """Rows of the uniform distribution over K classes."""
    return torch.full((batch_size, num_classes), 1.0 / num_classes)


def smooth_label(labels, num_classes, alpha):
    """Convex mixture of one-hot and uniform: (1-alpha)*y + alpha/K.

    alpha=0 gives the exact one-hot vector, alpha=1 the exact uniform one;
    the value at the true class is (1-alpha) + alpha/K.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"smoothing ratio must lie in [0, 1], got {alpha}")
    y = onehot(labels, num_classes)
    return (1.0 - alpha) * y + alpha / num_classes


def cross_entropy(target, probs):
    """Mean over the batch of -sum_k target_k * log(probs_k)."""
    target = torch.as_tensor(target)
    probs = torch.as_tensor(probs) if not torch.is_tensor(probs) else probs
    if target.ndim == 1:
        target = target[None]
    if probs.ndim == 1:
        probs = probs[None]
    if target.shape != probs.shape:
        raise ValueError(f"target shape {tuple(target.shape)} != probs shape {tuple(probs.shape)}")
    return -(target * _clamped_log(probs)).sum(dim=-1).mean()


def imitation_loss(copy_feats, cls_feats, index_sets):
    """Sum over hard group indices of the L1 gap between the two feature stacks.

    The reference features are treated as constants: no gradient flows back
    into the network that produced them. Reduction is a full elementwise sum
    per group, averaged over the batch.
    """
    total = None
    for j in index_sets.hard:
        a = copy_feats[j - 1]
        b = cls_feats[j - 1].detach()
        if a.shape != b.shape:
            raise ValueError(
                f"feature shape mismatch at hard index {j}: {tuple(a.shape)} vs {tuple(b.shape)}"
            )
        term = (a - b).abs().sum() / a.shape[0]
        total = term if total is None else total + term
    if total is None:
        return torch.tensor(0.0)
    return total


def copycat_loss(reg, imi):
    """Total Copycat objective: regularization plus imitation."""
    for name, value in (("reg", reg), ("imi", imi)):
        if not torch.isfinite(torch.as_tensor(value).detach()).all():
            raise ValueError(f"non-finite {name} term")
    return reg + imi


def _check_unit_interval(name, values):
    v = torch.as_tensor(values).detach()
    if v.min() < 0.0 or v.max() > 1.0:
        raise ValueError(f"{name} must lie in [0, 1]")


def discriminator_loss(d_real, d_fake):
    """-mean(log d_real) - mean(log(1 - d_fake)); the adversarial maximization
    objective negated for a descent step."""
    _check_unit_interval("d_real", d_real)
    _check_unit_interval("d_fake", d_fake)
    real_term = _clamped_log(torch.as_tensor(d_real) if not torch.is_tensor(d_real) else d_real)
    fake_term = _clamped_log(1.0 - (torch.as_tensor(d_fake) if not torch.is_tensor(d_fake) else d_fake))
    return -real_term.mean() - fake_term.mean()


def generator_loss(d_fake, cls_probs, beta):
    """The generator's slice of the adversarial objective.

    mean(log(1 - d_fake)) - (beta/K) * mean_batch(sum_k log cls_probs_k),
    where cls_probs are classifier outputs on the generated images (classifier
    frozen for this pass). With beta=0 the classifier term is dropped and
    cls_probs may be None.
    """
    _check_unit_interval("d_fake", d_fake)
    d_fake = torch.as_tensor(d_fake) if not torch.is_tensor(d_fake) else d_fake
    loss = _clamped_log(1.0 - d_fake).mean()
    if beta != 0.0:
        if cls_probs is None:
            raise ValueError("cls_probs required when beta != 0")
        cls_probs = torch.as_tensor(cls_probs) if not torch.is_tensor(cls_probs) else cls_probs
        k = cls_probs.shape[-1]
        loss = loss - (beta / k) * _clamped_log(cls_probs).sum(dim=-1).mean()
    if not torch.isfinite(loss.detach()):
        raise ValueError("generator loss is non-finite")
    return loss


def open_loss_copycat(copy_probs, labels, index_sets, weights):
    """Sum over every group index of the smoothed-label cross-entropy.

    copy_probs holds one probability batch per group index (index i at list
    position i - 1): the classifier's predictions on injected Copycat
    features. Hard indices are smoothed with alpha_hard, easy ones with
    alpha_easy.
    """
    n = index_sets.count
    if len(copy_probs) != n:
        raise ValueError(f"need {n} probability batches, got {len(copy_probs)}")
    total = None
    for i in index_sets.all:
        probs = copy_probs[i - 1]
        if probs is None:
            raise ValueError(f"missing probability batch for group index {i}")
        alpha = weights.alpha_hard if i in index_sets.hard else weights.alpha_easy
        target = smooth_label(labels, probs.shape[-1], alpha)
        term = cross_entropy(target, probs)
        total = term if total is None else total + term
    return total


def open_loss_gan(gan_probs):
    """Cross-entropy of classifier outputs on generated images vs uniform."""
    gan_probs = torch.as_tensor(gan_probs) if not torch.is_tensor(gan_probs) else gan_probs
    k = gan_probs.shape[-1]
    batch = gan_probs.shape[0] if gan_probs.ndim > 1 else 1
    return cross_entropy(uniform_target(k, batch), gan_probs)


def classifier_loss(close, open_term, lam):
    """Closed-set loss plus lam times the open-set loss."""
    for name, value in (("close", close), ("open", open_term)):
        if not torch.isfinite(torch.as_tensor(value).detach()).all():
            raise ValueError(f"non-finite {name} term")
    return close + lam * open_term
