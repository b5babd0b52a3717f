"""Experiment runner: subcommand dispatch, run persistence, report emission.

Subcommands: train, eval, suite, diagnose, predict, splits. Every run
directory is self-describing (config snapshot + seed + code version); runtime
failures exit nonzero with a machine-readable error JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import (
    DataPart,
    DataSplit,
    build_split,
    load_cifar10,
    load_cifar100,
    load_idx,
    load_mnist,
    make_mnist_noise,
    make_noise_dataset,
    registry_entries,
    registry_lookup,
)
from .evaluation import (
    DifficultyReport,
    MetricsRecord,
    auroc,
    classwise_difficulty_from_scores,
    macro_f1,
    openness,
    wasserstein_difficulty,
)
from .inference import inherent_threshold, probabilities, score
from .models import REAL
from .training import load_checkpoint, train


# ---------------------------------------------------------------------------
# Data resolution
# ---------------------------------------------------------------------------

def resolve_sources(config):
    """Load the dataset(s) a config's split needs, keyed by source name."""
    d = config.data
    name = d["dataset"]
    channels = config.models["in_channels"]
    size = config.models["image_size"]
    if name == "mnist":
        return {"mnist": load_mnist(d["root"], channels=channels, size=size)}
    if name == "cifar10":
        _require_channels(channels, 3, name)
        return {"cifar10": load_cifar10(d["root"], size=size)}
    if name.startswith("cifar+"):
        _require_channels(channels, 3, name)
        open_root = d["open_root"] or d["root"]
        return {
            "cifar10": load_cifar10(d["root"], size=size),
            "cifar100": load_cifar100(open_root, size=size),
        }
    raise ConfigError(f"no loader available for dataset {name!r}")


def _require_channels(channels, expected, name):
    if channels != expected:
        raise ConfigError(f"dataset {name!r} needs in_channels={expected}, got {channels}")


def subsample_per_class(part, per_class):
    """Deterministically keep the first N stored samples of each class."""
    if per_class is None:
        return part
    keep = []
    seen = {}
    for i, label in enumerate(part.labels):
        c = int(label)
        if seen.get(c, 0) < per_class:
            keep.append(i)
            seen[c] = seen.get(c, 0) + 1
    return part.subset(np.asarray(keep, dtype=np.int64))


def resolve_split(config, trial=None):
    d = config.data
    trial = d["trial"] if trial is None else trial
    spec = registry_lookup(d["protocol"], d["dataset"], trial)
    sources = resolve_sources(config)
    split = build_split(sources, spec)
    split.closed_train = subsample_per_class(split.closed_train, d["max_train_per_class"])
    return split


# ---------------------------------------------------------------------------
# Evaluation core (shared by train / eval / suite)
# ---------------------------------------------------------------------------

def _sweep_grid():
    return np.round(np.arange(0.0, 1.0 + 1e-9, 0.01), 2)


def evaluate_split(classifier, split, alpha_hard, epsilon, threshold_mode="inherent",
                   threshold=None, seed=0):
    """Score a classifier on a materialized split and assemble a MetricsRecord."""
    K = len(split.class_map)
    if classifier.cfg.num_classes != K:
        raise ValueError(
            f"checkpoint has {classifier.cfg.num_classes} classes, split has {K}"
        )
    known_scores = score(classifier, split.closed_test.images)
    unknown_scores = score(classifier, split.open_test.images)
    overall_auroc = auroc(known_scores, unknown_scores)
    per_class = {}
    for c in split.spec.open:
        mask = split.open_test.labels == c
        if mask.any():
            per_class[int(c)] = auroc(known_scores, unknown_scores[mask])

    probs = np.concatenate([
        probabilities(classifier, split.closed_test.images),
        probabilities(classifier, split.open_test.images),
    ])
    conf = probs.max(axis=1)
    argmax = probs.argmax(axis=1)
    truth = np.concatenate([
        split.closed_test.labels,
        np.full(len(split.open_test), K, dtype=np.int64),
    ])

    def f1_at(t):
        pred = np.where(conf < t, K, argmax)
        return macro_f1(pred, truth, K)

    inherent_t = inherent_threshold(K, alpha_hard, epsilon)
    f1_inherent = f1_at(inherent_t)
    grid = _sweep_grid()
    f1_grid = [f1_at(t) for t in grid]
    best_i = int(np.argmax(f1_grid))
    f1_best, best_t = f1_grid[best_i], float(grid[best_i])

    if threshold is not None:
        used_t, used_f1 = float(threshold), f1_at(threshold)
    elif threshold_mode == "sweep":
        used_t, used_f1 = best_t, f1_best
    elif threshold_mode == "inherent":
        used_t, used_f1 = inherent_t, f1_inherent
    else:
        raise ValueError(f"unknown threshold mode {threshold_mode!r}")

    closed_acc = float(
        (probabilities(classifier, split.closed_test.images).argmax(axis=1)
         == split.closed_test.labels).mean()
    )
    return MetricsRecord(
        auroc=overall_auroc,
        macro_f1=used_f1,
        openness=openness(K, len(split.spec.open)),
        threshold=used_t,
        per_class_auroc=per_class,
        split_id=f"{split.spec.protocol}/{split.spec.dataset}/trial{split.spec.trial}",
        seed=seed,
        extra={
            "threshold_mode": "override" if threshold is not None else threshold_mode,
            "closed_accuracy": closed_acc,
            "f1_inherent": f1_inherent,
            "f1_best": f1_best,
            "best_threshold": best_t,
            "f1_gap": f1_best - f1_inherent,
            "inherent_threshold": inherent_t,
        },
    )


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def run_train(config, trial=None, out=None, log=None):
    """Train one run; the run directory gets the config snapshot, metrics
    stream, checkpoints, and a final MetricsRecord."""
    out = Path(out or config.out or "runs/run")
    out.mkdir(parents=True, exist_ok=True)
    split = resolve_split(config, trial)
    snapshot = config.resolved()
    snapshot["data"]["trial"] = split.spec.trial
    snapshot["out"] = str(out)
    snapshot["config_hash"] = config.hash()
    snapshot["code_version"] = __version__
    (out / "config.json").write_text(json.dumps(snapshot, indent=1))

    model_cfg = config.model_config(num_classes=len(split.spec.known))
    train_cfg = config.training_config()
    state, history = train(model_cfg, train_cfg, split, out_dir=out, log=log)
    record = evaluate_split(
        state.classifier, split, train_cfg.weights.alpha_hard, config.epsilon,
        threshold_mode="inherent", seed=config.seed,
    )
    (out / "metrics_final.json").write_text(json.dumps(record.to_dict(), indent=1))
    return out


def _load_run(checkpoint_path):
    """Checkpoint plus the run config saved next to it."""
    checkpoint_path = Path(checkpoint_path)
    state = load_checkpoint(checkpoint_path)
    config_path = checkpoint_path.parent / "config.json"
    config = None
    if config_path.exists():
        config = parse_config(_strip_extras(json.loads(config_path.read_text())))
    return state, config


def _strip_extras(snapshot):
    return {k: v for k, v in snapshot.items() if k not in ("config_hash", "code_version")}


def run_eval(checkpoint, trial=None, threshold_mode="inherent", threshold=None,
             epsilon=None, config=None, out=None):
    state, run_config = _load_run(checkpoint)
    config = config or run_config
    if config is None:
        raise ConfigError(
            "no config.json found beside the checkpoint; pass --config explicitly"
        )
    split = resolve_split(config, trial)
    alpha_hard = state.train_config.weights.alpha_hard
    eps = config.epsilon if epsilon is None else epsilon
    record = evaluate_split(
        state.classifier, split, alpha_hard, eps,
        threshold_mode=threshold_mode, threshold=threshold, seed=config.seed,
    )
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(record.to_dict(), indent=1))
    return record


def run_suite(config, trials, out=None, log=None):
    """Train and evaluate each trial; report mean and sample std per metric."""
    out = Path(out or config.out or "runs/suite")
    results, failures = [], []
    for t in trials:
        try:
            run_dir = run_train(config, trial=t, out=out / f"trial{t}", log=log)
            record = json.loads((run_dir / "metrics_final.json").read_text())
            results.append({"trial": t, **record})
        except Exception as exc:  # noqa: BLE001 - suite must survive trial failures
            failures.append({"trial": t, "error": f"{type(exc).__name__}: {exc}"})
    summary = {"trials": [r["trial"] for r in results], "failures": failures,
               "degenerate": len(results) == 1, "code_version": __version__}
    for metric in ("auroc", "macro_f1", "closed_accuracy", "f1_inherent", "f1_best"):
        values = [r[metric] for r in results if metric in r]
        if not values:
            continue
        mean = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        summary[metric] = {
            "mean": mean,
            "std": std,
            "values": values,
            "formatted": f"{mean:.3f} ± {std:.3f}",
        }
    out.mkdir(parents=True, exist_ok=True)
    (out / "suite_summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def _pooled_features(net, images, bank=REAL, batch_size=512):
    """Penultimate (pre-head) feature vectors, eval mode."""
    was_training = net.training
    net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(images[start : start + batch_size])
            feats = net.features(x, bank=bank)[-1]
            out.append(net.pooled(feats).numpy())
    net.train(was_training)
    return np.concatenate(out)


def _scores_from_pooled(net, pooled):
    with torch.no_grad():
        logits = net.head(torch.from_numpy(pooled))
        return torch.softmax(logits, dim=-1).max(dim=-1).values.numpy()


def _fake_feature_sets(state, images, n_gan, seed=0):
    """Penultimate features and confidence scores for each fake source.

    Copycat features are injected into the classifier at each hard/easy group
    boundary and carried to the penultimate layer; generated images go through
    the whole classifier. Everything uses the real statistics bank so all
    sources live in one embedding.
    """
    cls, copy, gen = state.classifier, state.copycat, state.generator
    idx = state.index_sets
    cls.eval(), copy.eval(), gen.eval()
    sets = {}
    with torch.no_grad():
        copy_feats = []
        for start in range(0, len(images), 512):
            x = torch.from_numpy(images[start : start + 512])
            copy_feats.append(copy.features(x, bank=REAL))
        for tag, indices in (("hard", idx.hard), ("easy", idx.easy)):
            pooled, scores = [], []
            for i in indices:
                for chunk in copy_feats:
                    final = cls.run_from_group(i, chunk[i - 1], bank=REAL)
                    p = cls.pooled(final)
                    pooled.append(p.numpy())
                    scores.append(torch.softmax(cls.head(p), -1).max(-1).values.numpy())
            sets[tag] = (np.concatenate(pooled), np.concatenate(scores))
        rng = torch.Generator()
        rng.manual_seed(seed)
        z = torch.randn(n_gan, state.model_config.z_dim, generator=rng)
        fake_imgs = gen(z).numpy()
    gan_pooled = _pooled_features(cls, fake_imgs)
    gan_scores = _scores_from_pooled(cls, gan_pooled)
    sets["gan"] = (gan_pooled, gan_scores)
    return sets


def export_features(path_stem, features, source_tag):
    """Flat little-endian float32 binary plus a JSON sidecar."""
    path_stem = Path(path_stem)
    arr = np.ascontiguousarray(features, dtype="<f4")
    path_stem.with_suffix(".f32").write_bytes(arr.tobytes())
    sidecar = {
        "count": int(arr.shape[0]),
        "dim": int(arr.shape[1]),
        "source": source_tag,
        "dtype": "float32-little-endian",
    }
    path_stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))


def run_diagnose(checkpoint, baseline_checkpoint=None, out=None, config=None,
                 trial=None, n_projections=128, seed=0):
    """Difficulty diagnostics: normalized Wasserstein distance and AUROC per
    fake source, optional class-wise report, and feature exports."""
    state, run_config = _load_run(checkpoint)
    config = config or run_config
    if config is None:
        raise ConfigError(
            "no config.json found beside the checkpoint; pass --config explicitly"
        )
    split = resolve_split(config, trial)
    cls = state.classifier

    closed_images = split.closed_test.images
    half_a = closed_images[0::2]  # the closed target fold
    half_b = closed_images[1::2]  # held-out reference fold
    closed_pooled = _pooled_features(cls, half_a)
    ref_pooled = _pooled_features(cls, half_b)
    closed_scores = _scores_from_pooled(cls, closed_pooled)

    report = DifficultyReport()
    fakes = _fake_feature_sets(state, half_a, n_gan=len(half_a), seed=seed)
    for tag, (pooled, scores) in fakes.items():
        report.wasserstein[tag] = wasserstein_difficulty(
            pooled, closed_pooled, ref_pooled, n_projections=n_projections, seed=seed
        )
        report.fake_auroc[tag] = auroc(closed_scores, scores)

    if baseline_checkpoint is not None:
        baseline_state, _ = _load_run(baseline_checkpoint)
        base_cls = baseline_state.classifier
        base_known = score(base_cls, split.closed_test.images)
        model_known = score(cls, split.closed_test.images)
        open_scores, base_auroc = {}, {}
        for c in split.spec.open:
            mask = split.open_test.labels == c
            if not mask.any():
                continue
            imgs = split.open_test.images[mask]
            base_auroc[int(c)] = auroc(base_known, score(base_cls, imgs))
            open_scores[int(c)] = score(cls, imgs)
        class_report = classwise_difficulty_from_scores(model_known, open_scores, base_auroc)
        report.class_auroc = class_report.class_auroc
        report.class_improvement = class_report.class_improvement
        report.class_bin = class_report.class_bin
        report.bin_improvement = class_report.bin_improvement

    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "difficulty_report.json").write_text(json.dumps(report.to_dict(), indent=1))
        export_features(out / "features_closed", closed_pooled, "closed")
        export_features(out / "features_reference", ref_pooled, "reference")
        for tag, (pooled, _) in fakes.items():
            export_features(out / f"features_{tag}", pooled, tag)
    return report


def run_predict(checkpoint, input_path, threshold=None, epsilon=None, out=None):
    """Open-set predictions for raw images in an IDX or .npy file, as JSONL."""
    from .data import prepare_images
    from .inference import predict

    state, run_config = _load_run(checkpoint)
    cfg = state.model_config
    input_path = Path(input_path)
    if input_path.suffix == ".npy":
        raw = np.load(input_path)
    else:
        raw = load_idx(input_path)
    if raw.dtype != np.uint8:
        raise ValueError("prediction input must be uint8 pixels (0..255)")
    images = prepare_images(raw, channels=cfg.in_channels, size=cfg.image_size)
    alpha_hard = state.train_config.weights.alpha_hard
    if threshold is None:
        eps = epsilon
        if eps is None:
            eps = run_config.epsilon if run_config is not None else -0.05
        threshold = inherent_threshold(cfg.num_classes, alpha_hard, eps)
    preds = predict(state.classifier, images, threshold)
    lines = [json.dumps(r) for r in preds.to_records()]
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    return preds


def run_splits(protocol=None, dataset=None, trial=None):
    entries = []
    for spec in registry_entries():
        if protocol is not None and spec.protocol != protocol:
            continue
        if dataset is not None and spec.dataset != dataset:
            continue
        if trial is not None and spec.trial != trial:
            continue
        entries.append({
            "protocol": spec.protocol,
            "dataset": spec.dataset,
            "trial": spec.trial,
            "known": list(spec.known),
            "open": list(spec.open),
        })
    return entries


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="osrsim", description="Open-set recognition experiment runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--trial", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--trial", type=int, default=None)
    p.add_argument("--threshold-mode", choices=["inherent", "sweep"], default="inherent")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("suite", help="run several trials and aggregate")
    p.add_argument("--config", required=True)
    p.add_argument("--trials", default="0,1,2,3,4",
                   help="comma-separated trial indices")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("diagnose", help="difficulty diagnostics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline-checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--trial", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("predict", help="open-set predictions for raw images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("splits", help="print registry entries")
    p.add_argument("--protocol", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--trial", type=int, default=None)
    return parser


def _load_cli_config(args):
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "out", None) is not None:
        config.out = args.out
    return config


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            out = run_train(_load_cli_config(args), trial=args.trial, out=args.out,
                            log=lambda r: print(json.dumps(r)))
            print(json.dumps({"run_dir": str(out)}))
        elif args.command == "eval":
            config = load_config(args.config) if args.config else None
            record = run_eval(
                args.checkpoint, trial=args.trial, threshold_mode=args.threshold_mode,
                threshold=args.threshold, epsilon=args.epsilon, config=config,
                out=args.out,
            )
            print(json.dumps(record.to_dict(), indent=1))
        elif args.command == "suite":
            trials = [int(t) for t in args.trials.split(",") if t != ""]
            summary = run_suite(_load_cli_config(args), trials, out=args.out)
            print(json.dumps(summary, indent=1))
        elif args.command == "diagnose":
            config = load_config(args.config) if args.config else None
            report = run_diagnose(
                args.checkpoint, baseline_checkpoint=args.baseline_checkpoint,
                config=config, trial=args.trial, out=args.out,
            )
            print(json.dumps(report.to_dict(), indent=1))
        elif args.command == "predict":
            run_predict(args.checkpoint, args.input, threshold=args.threshold,
                        epsilon=args.epsilon, out=args.out)
        elif args.command == "splits":
            entries = run_splits(args.protocol, args.dataset, args.trial)
            print(json.dumps(entries, indent=1))
        return 0
    except Exception as exc:  # noqa: BLE001 - contract: error JSON + nonzero exit
        sys.stderr.write(json.dumps({
            "error": type(exc).__name__,
            "message": str(exc),
            "trace": traceback.format_exc().splitlines()[-3:],
        }) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
