"""Open-set prediction using the confidence threshold the training targets imply.

The smoothed target used for hard fakes peaks at (1 - alpha_hard) + alpha_hard/K;
training pushes fake confidences at or below that value, so the same number
(plus a small offset) separates knowns from unknowns at test time with no
threshold search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .models import REAL

DEFAULT_EPSILON = -0.05


def inherent_threshold(num_classes, alpha_hard=0.5, epsilon=DEFAULT_EPSILON):
    """tau + epsilon, where tau = (1 - alpha_hard) + alpha_hard / K."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if not 0.0 <= alpha_hard <= 1.0:
        raise ValueError("alpha_hard must lie in [0, 1]")
    tau = (1.0 - alpha_hard) + alpha_hard / num_classes
    return tau + epsilon


@dataclass
class OpenSetPredictions:
    """Batch of open-set decisions; label == unknown_label marks a rejection."""

    labels: np.ndarray
    confidences: np.ndarray
    threshold: float
    unknown_label: int

    def __len__(self):
        return len(self.labels)

    def to_records(self):
        return [
            {"index": i, "label": int(l), "confidence": float(c)}
            for i, (l, c) in enumerate(zip(self.labels, self.confidences))
        ]


def probabilities(net, images, batch_size=512):
    """Class probabilities in eval mode through the real statistics bank."""
    was_training = net.training
    net.eval()
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(net(images[start : start + batch_size], bank=REAL).numpy())
    net.train(was_training)
    return np.concatenate(out)


def score(net, images, batch_size=512):
    """Max softmax probability per sample: the known-vs-unknown confidence score."""
    return probabilities(net, images, batch_size).max(axis=1)


def predict(net, images, threshold, batch_size=512):
    """Argmax class when confidence reaches the threshold, else the unknown label K.

    The unknown decision uses a strict '<': a confidence exactly equal to the
    threshold stays a known class.
    """
    probs = probabilities(net, images, batch_size)
    conf = probs.max(axis=1)
    labels = probs.argmax(axis=1).astype(np.int64)
    unknown_label = probs.shape[1]
    labels[conf < threshold] = unknown_label
    return OpenSetPredictions(labels, conf, float(threshold), unknown_label)
