"""Metrics (AUROC, macro-F1, openness) and difficulty diagnostics
(sliced Wasserstein distance, KL-to-uniform, class-wise difficulty bins)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import inference


def auroc(known_scores, unknown_scores):
    """Probability that a random known score exceeds a random unknown score,
    ties counted one half (the rank-statistic form of the ROC area)."""
    known = np.asarray(known_scores, dtype=np.float64).ravel()
    unknown = np.asarray(unknown_scores, dtype=np.float64).ravel()
    if len(known) == 0 or len(unknown) == 0:
        raise ValueError("both score sets must be nonempty")
    u_sorted = np.sort(unknown)
    below = np.searchsorted(u_sorted, known, side="left")
    below_or_equal = np.searchsorted(u_sorted, known, side="right")
    wins = below.sum(dtype=np.float64)
    ties = (below_or_equal - below).sum(dtype=np.float64)
    return float((wins + 0.5 * ties) / (len(known) * len(unknown)))


def macro_f1(pred_labels, true_labels, num_known):
    """Unweighted mean F1 over the K known classes plus the unknown class K.

    Truth must map every open-set sample to label K. A class absent from both
    truth and predictions contributes zero (the pessimistic convention).
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("prediction/truth length mismatch")
    n_classes = num_known + 1
    for name, arr in (("prediction", pred), ("truth", true)):
        if len(arr) and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} label outside 0..{n_classes - 1}")
    f1s = np.zeros(n_classes)
    for c in range(n_classes):
        tp = int(((pred == c) & (true == c)).sum())
        fp = int(((pred == c) & (true != c)).sum())
        fn = int(((pred != c) & (true == c)).sum())
        denom = 2 * tp + fp + fn
        f1s[c] = (2 * tp / denom) if denom > 0 else 0.0
    return float(f1s.mean())


def openness(num_known, num_unknown):
    """1 - sqrt(K / (K + K_hat)): how dominant unknown classes are."""
    if num_known < 1 or num_unknown < 0:
        raise ValueError("need num_known >= 1 and num_unknown >= 0")
    return 1.0 - float(np.sqrt(num_known / (num_known + num_unknown)))


def kl_to_uniform(probs):
    """Per-row KL divergence to the uniform distribution: sum_k p_k log(p_k K).

    Zero entries contribute nothing (0 log 0 := 0); the result is zero exactly
    when the row is uniform.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    k = p.shape[1]
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p * k, 1.0)), 0.0)
    return terms.sum(axis=1)


def wasserstein_1d(u, v):
    """Exact 1-D earth mover's distance between two sample sets."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if len(u) < 2 or len(v) < 2:
        raise ValueError("need at least 2 samples per set")
    return float(stats.wasserstein_distance(u, v))


def sliced_wasserstein(a, b, n_projections=128, seed=0):
    """Mean 1-D Wasserstein distance over seeded random unit projections."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("expected two (N, d) feature arrays with matching d")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples per set")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for d in dirs:
        total += wasserstein_1d(a @ d, b @ d)
    return total / n_projections


def wasserstein_difficulty(fake_features, closed_features, reference_features,
                           n_projections=128, seed=0):
    """Sliced Wasserstein distance of fakes to the closed set, normalized by the
    same distance between a held-out closed fold and the closed set.

    A value near 1 means the fakes look as close to the closed set as real
    held-out data does; larger values mean easier (more distant) fakes.
    """
    raw = sliced_wasserstein(fake_features, closed_features, n_projections, seed)
    ref = sliced_wasserstein(reference_features, closed_features, n_projections, seed)
    if ref == 0.0:
        raise ValueError("reference distance is zero; folds are identical")
    return raw / ref


@dataclass
class MetricsRecord:
    """One evaluation outcome for a split."""

    auroc: float
    macro_f1: float
    openness: float
    threshold: float
    per_class_auroc: dict = field(default_factory=dict)
    split_id: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "auroc": self.auroc,
            "macro_f1": self.macro_f1,
            "openness": self.openness,
            "threshold": self.threshold,
            "per_class_auroc": {str(k): v for k, v in self.per_class_auroc.items()},
            "split_id": self.split_id,
            "seed": self.seed,
            **self.extra,
        }


@dataclass
class DifficultyReport:
    """Difficulty diagnostics: fake-set level and (optionally) class level."""

    wasserstein: dict = field(default_factory=dict)   # fake source -> normalized W.D.
    fake_auroc: dict = field(default_factory=dict)    # fake source -> AUROC vs closed
    class_auroc: dict = field(default_factory=dict)   # open class -> AUROC
    class_improvement: dict = field(default_factory=dict)  # open class -> delta vs baseline
    class_bin: dict = field(default_factory=dict)     # open class -> difficulty bin index
    bin_improvement: dict = field(default_factory=dict)  # bin index -> mean improvement
    bin_width: float = 0.05

    def to_dict(self):
        return {
            "wasserstein": dict(self.wasserstein),
            "fake_auroc": dict(self.fake_auroc),
            "class_auroc": {str(k): v for k, v in self.class_auroc.items()},
            "class_improvement": {str(k): v for k, v in self.class_improvement.items()},
            "class_bin": {str(k): v for k, v in self.class_bin.items()},
            "bin_improvement": {str(k): v for k, v in self.bin_improvement.items()},
            "bin_width": self.bin_width,
        }


def difficulty_bin(value, bin_width=0.05):
    """Index of the difficulty bin containing an AUROC value; bins are
    [0, w), [w, 2w), ..., with the final bin closed at 1."""
    n_bins = int(round(1.0 / bin_width))
    return min(int(value / bin_width), n_bins - 1)


def classwise_difficulty_from_scores(closed_scores, open_scores_by_class,
                                     baseline_auroc_by_class, bin_width=0.05):
    """Class-level difficulty report from precomputed confidence scores.

    Each open class gets its own AUROC against the closed scores; classes are
    bucketed by the baseline model's per-class AUROC into bins of the given
    width, and the report carries the mean improvement over baseline per bin.
    """
    report = DifficultyReport(bin_width=bin_width)
    bins = {}
    for cls_id, scores in open_scores_by_class.items():
        if cls_id not in baseline_auroc_by_class:
            raise KeyError(f"no baseline AUROC for open class {cls_id}")
        a = auroc(closed_scores, scores)
        base = baseline_auroc_by_class[cls_id]
        b = difficulty_bin(base, bin_width)
        report.class_auroc[cls_id] = a
        report.class_improvement[cls_id] = a - base
        report.class_bin[cls_id] = b
        bins.setdefault(b, []).append(a - base)
    report.bin_improvement = {b: float(np.mean(v)) for b, v in sorted(bins.items())}
    return report


def classwise_difficulty(model, closed_images, open_images_by_class,
                         baseline_auroc_by_class, bin_width=0.05):
    """Score a model and build the class-level difficulty report."""
    closed_scores = inference.score(model, closed_images)
    open_scores = {
        cls_id: inference.score(model, imgs)
        for cls_id, imgs in open_images_by_class.items()
    }
    return classwise_difficulty_from_scores(
        closed_scores, open_scores, baseline_auroc_by_class, bin_width
    )
