"""Joint training: per mini-batch, a Copycat phase then a GAN phase.

Phase one trains the Copycat (imitation + regularization) and then the
classifier against its injected features; phase two trains the generator,
the discriminator, and then the classifier against generated images. Each
update touches exactly one parameter set; everything else enters as a
constant.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import inference, losses
from .losses import (
    classifier_loss,
    copycat_loss,
    cross_entropy,
    discriminator_loss,
    generator_loss,
    imitation_loss,
    LossWeights,
    onehot,
    open_loss_copycat,
    open_loss_gan,
)
from .models import (
    FAKE,
    REAL,
    GroupIndexSets,
    ModelConfig,
    build_classifier,
    build_gan,
)

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries a diagnostic record of the failing step."""

    def __init__(self, record):
        super().__init__(f"non-finite loss: {record}")
        self.record = record


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 128
    lr_classifier: float = 0.01
    lr_copycat: float = 0.01
    momentum: float = 0.9
    cosine_decay: bool = True
    lr_gan: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 10  # epochs; 0 = final checkpoint only
    eval_every: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    index_sets: GroupIndexSets | None = None
    train_generators: bool = True  # False = plain closed-set CE baseline

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs it)")
        if not self.train_generators and self.weights.lam != 0.0:
            raise ValueError("baseline mode (train_generators=False) requires lam=0")


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically."""

    model_config: ModelConfig
    train_config: TrainingConfig
    classifier: torch.nn.Module
    copycat: torch.nn.Module
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    opt_classifier: torch.optim.Optimizer
    opt_copycat: torch.optim.Optimizer
    opt_generator: torch.optim.Optimizer
    opt_discriminator: torch.optim.Optimizer
    schedulers: list
    noise_rng: torch.Generator
    sampler: np.random.Generator
    epoch: int = 0
    iteration: int = 0
    perm: np.ndarray | None = None
    cursor: int = 0

    @property
    def index_sets(self):
        return self.train_config.index_sets

    def nets(self):
        return {
            "classifier": self.classifier,
            "copycat": self.copycat,
            "generator": self.generator,
            "discriminator": self.discriminator,
        }

    def optimizers(self):
        return {
            "classifier": self.opt_classifier,
            "copycat": self.opt_copycat,
            "generator": self.opt_generator,
            "discriminator": self.opt_discriminator,
        }

    def state_dict(self):
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "manifest": {
                "config_hash": self.model_config.config_hash(),
                "epoch": self.epoch,
                "seed": self.train_config.seed,
                "iteration": self.iteration,
            },
            "model_config": asdict(self.model_config),
            "train_config": _train_config_dict(self.train_config),
            "nets": {name: net.state_dict() for name, net in self.nets().items()},
            "optimizers": {name: o.state_dict() for name, o in self.optimizers().items()},
            "schedulers": [s.state_dict() for s in self.schedulers],
            "noise_rng": self.noise_rng.get_state(),
            "torch_rng": torch.get_rng_state(),
            "sampler": self.sampler.bit_generator.state,
            "perm": None if self.perm is None else self.perm.copy(),
            "cursor": self.cursor,
        }

    def load_state_dict(self, blob):
        if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {blob.get('format_version')!r}")
        for name, net in self.nets().items():
            net.load_state_dict(blob["nets"][name])
        for name, opt in self.optimizers().items():
            opt.load_state_dict(blob["optimizers"][name])
        for sched, sd in zip(self.schedulers, blob["schedulers"]):
            sched.load_state_dict(sd)
        self.noise_rng.set_state(blob["noise_rng"])
        torch.set_rng_state(blob["torch_rng"])
        self.sampler.bit_generator.state = blob["sampler"]
        self.epoch = blob["manifest"]["epoch"]
        self.iteration = blob["manifest"]["iteration"]
        self.perm = None if blob["perm"] is None else np.asarray(blob["perm"])
        self.cursor = blob["cursor"]


def _train_config_dict(cfg):
    d = asdict(cfg)
    d["weights"] = asdict(cfg.weights)
    d["index_sets"] = None if cfg.index_sets is None else {
        "hard": list(cfg.index_sets.hard),
        "easy": list(cfg.index_sets.easy),
    }
    return d


def train_config_from_dict(d):
    d = dict(d)
    d["weights"] = LossWeights(**d["weights"])
    if d["index_sets"] is not None:
        d["index_sets"] = GroupIndexSets(
            hard=tuple(d["index_sets"]["hard"]), easy=tuple(d["index_sets"]["easy"])
        )
    return TrainingConfig(**d)


def init_state(model_config, train_config):
    """Seed everything and build the four networks plus their optimizers."""
    cfg = train_config
    if cfg.index_sets is None:
        cfg.index_sets = GroupIndexSets.default(model_config.n_groups)
    if cfg.index_sets.count != model_config.n_groups:
        raise ValueError("index sets do not cover the configured group count")
    torch.manual_seed(cfg.seed)
    classifier = build_classifier(model_config)
    copycat = build_classifier(model_config)  # independent random init
    generator, discriminator = build_gan(model_config)

    # foreach=False pins the single-tensor kernel: the multi-tensor path picks
    # different fusions for fresh vs checkpoint-loaded state, breaking
    # bit-identical resume
    opt_classifier = torch.optim.SGD(
        classifier.parameters(), lr=cfg.lr_classifier, momentum=cfg.momentum,
        foreach=False,
    )
    opt_copycat = torch.optim.SGD(
        copycat.parameters(), lr=cfg.lr_copycat, momentum=cfg.momentum,
        foreach=False,
    )
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_generator = torch.optim.Adam(
        generator.parameters(), lr=cfg.lr_gan, betas=betas, foreach=False
    )
    opt_discriminator = torch.optim.Adam(
        discriminator.parameters(), lr=cfg.lr_gan, betas=betas, foreach=False
    )
    schedulers = []
    if cfg.cosine_decay:
        schedulers = [
            torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
            for opt in (opt_classifier, opt_copycat)
        ]
    noise_rng = torch.Generator()
    noise_rng.manual_seed(cfg.seed + 1)
    sampler = np.random.default_rng(cfg.seed + 2)
    return TrainState(
        model_config=model_config,
        train_config=cfg,
        classifier=classifier,
        copycat=copycat,
        generator=generator,
        discriminator=discriminator,
        opt_classifier=opt_classifier,
        opt_copycat=opt_copycat,
        opt_generator=opt_generator,
        opt_discriminator=opt_discriminator,
        schedulers=schedulers,
        noise_rng=noise_rng,
        sampler=sampler,
    )


@contextmanager
def frozen(*nets):
    """Temporarily stop gradient tracking on the given networks' parameters."""
    saved = [(p, p.requires_grad) for net in nets for p in net.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def _require_finite(value, state, phase, record):
    if not torch.isfinite(value.detach()).all():
        raise TrainingDiverged(
            {"epoch": state.epoch + 1, "iteration": state.iteration, "phase": phase, **record}
        )


def phase_one_step(state, images, labels):
    """Copycat update, then classifier update against injected Copycat features."""
    cfg = state.train_config
    w = cfg.weights
    idx = state.index_sets
    cls, copy = state.classifier, state.copycat
    K = state.model_config.num_classes
    record = {}
    cls.train()
    copy.train()

    if cfg.train_generators:
        # (a) Copycat: imitate the classifier at hard groups, classify correctly everywhere
        with torch.no_grad():
            cls_feats = cls.features(images)
        copy_feats = copy.features(images)
        reg = cross_entropy(onehot(labels, K), copy.head_probs(copy_feats[-1]))
        imi = imitation_loss(copy_feats, cls_feats, idx)
        record.update(copy_reg=reg.item(), copy_imi=imi.item())
        _require_finite(reg, state, 1, record)
        _require_finite(imi, state, 1, record)
        l_copy = copycat_loss(reg, imi)
        record.update(copy_total=l_copy.item())
        _require_finite(l_copy, state, 1, record)
        state.opt_copycat.zero_grad()
        l_copy.backward()
        state.opt_copycat.step()

    # (b) classifier: closed-set CE plus smoothed-label CE on fresh Copycat fakes
    close = cross_entropy(onehot(labels, K), cls(images))
    record.update(cls_close=close.item())
    _require_finite(close, state, 1, record)
    if cfg.train_generators and w.lam != 0.0:
        with torch.no_grad():
            fresh_feats = copy.features(images)
        copy_probs = [
            cls.forward_from_group(i, fresh_feats[i - 1], bank=REAL) for i in idx.all
        ]
        open_term = open_loss_copycat(copy_probs, labels, idx, w)
        record.update(cls_open=open_term.item())
        _require_finite(open_term, state, 1, record)
        l_cls = classifier_loss(close, open_term, w.lam)
    else:
        l_cls = close
    record.update(cls_total=l_cls.item())
    state.opt_classifier.zero_grad()
    l_cls.backward()
    state.opt_classifier.step()
    return record


def phase_two_step(state, images, labels):
    """Generator, then discriminator, then classifier against generated images."""
    cfg = state.train_config
    w = cfg.weights
    cls, gen, disc = state.classifier, state.generator, state.discriminator
    K = state.model_config.num_classes
    z_dim = state.model_config.z_dim
    B = images.shape[0]
    record = {}
    cls.train()
    gen.train()
    disc.train()

    def noise():
        return torch.randn(B, z_dim, generator=state.noise_rng)

    if cfg.train_generators:
        # (a) generator: fool the discriminator, court the (frozen) classifier
        fake = gen(noise())
        with frozen(disc, cls):
            d_fake = disc(fake)
            _require_finite(d_fake, state, 2, record)
            cls_probs = cls(fake, bank=FAKE) if w.beta != 0.0 else None
            if cls_probs is not None:
                _require_finite(cls_probs, state, 2, record)
            l_gen = generator_loss(d_fake, cls_probs, w.beta)
        record.update(gen=l_gen.item())
        _require_finite(l_gen, state, 2, record)
        state.opt_generator.zero_grad()
        l_gen.backward()
        state.opt_generator.step()

        # (b) discriminator on real vs freshly generated images
        with torch.no_grad():
            fake2 = gen(noise())
        d_real = disc(images)
        d_fake2 = disc(fake2)
        l_disc = discriminator_loss(d_real, d_fake2)
        record.update(disc=l_disc.item())
        _require_finite(l_disc, state, 2, record)
        state.opt_discriminator.zero_grad()
        l_disc.backward()
        state.opt_discriminator.step()

    # (c) classifier: closed-set CE plus uniform-target CE on a fresh noise batch
    close = cross_entropy(onehot(labels, K), cls(images))
    record.update(cls_close=close.item())
    _require_finite(close, state, 2, record)
    if cfg.train_generators and w.lam != 0.0:
        with torch.no_grad():
            fake3 = gen(noise())
        p_gan = cls(fake3, bank=FAKE)
        open_term = open_loss_gan(p_gan)
        record.update(cls_open=open_term.item())
        _require_finite(open_term, state, 2, record)
        l_cls = classifier_loss(close, open_term, w.lam)
    else:
        l_cls = close
    record.update(cls_total=l_cls.item())
    state.opt_classifier.zero_grad()
    l_cls.backward()
    state.opt_classifier.step()
    return record


def _eval_mode(*nets):
    for n in nets:
        n.eval()


def closed_accuracy(net, part, batch_size=512):
    """Top-1 accuracy on a closed-set part (eval mode, real statistics)."""
    _eval_mode(net)
    correct = 0
    with torch.no_grad():
        for start in range(0, len(part), batch_size):
            x = torch.from_numpy(part.images[start : start + batch_size])
            probs = net(x, bank=REAL)
            pred = probs.argmax(dim=-1).numpy()
            correct += int((pred == part.labels[start : start + batch_size]).sum())
    return correct / len(part)


def probe_imitation(state, images):
    """Imitation loss on a fixed probe batch, eval mode; tracks Copycat convergence."""
    _eval_mode(state.classifier, state.copycat)
    with torch.no_grad():
        cls_feats = state.classifier.features(images)
        copy_feats = state.copycat.features(images)
        return imitation_loss(copy_feats, cls_feats, state.index_sets).item()


def epoch_metrics(state, split, probe_batch):
    rec = {
        "closed_accuracy": closed_accuracy(state.classifier, split.closed_test),
        "probe_imitation": probe_imitation(state, probe_batch),
        "lr_classifier": state.opt_classifier.param_groups[0]["lr"],
    }
    if len(split.open_test) > 0:
        from .evaluation import auroc

        known = inference.score(state.classifier, split.closed_test.images)
        unknown = inference.score(state.classifier, split.open_test.images)
        rec["auroc"] = auroc(known, unknown)
    return rec


def train(model_config, train_config, split, out_dir=None, state=None, log=None):
    """Run the two-phase loop over the split's closed training data.

    Returns (state, history) where history holds per-iteration loss records and
    per-epoch evaluation records. When out_dir is given, the same records are
    streamed to metrics.jsonl and checkpoints are written at the configured
    cadence.
    """
    if len(split.closed_train) == 0:
        raise ValueError("empty training set")
    if model_config.num_classes != len(split.class_map):
        raise ValueError(
            f"model has {model_config.num_classes} classes but split has "
            f"{len(split.class_map)} known classes"
        )
    if state is None:
        state = init_state(model_config, train_config)
    cfg = state.train_config
    train_part = split.closed_train
    probe_batch = torch.from_numpy(train_part.images[: min(cfg.batch_size, len(train_part))])
    history = {"iterations": [], "epochs": []}

    out_dir = Path(out_dir) if out_dir is not None else None
    stream = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        stream = open(out_dir / "metrics.jsonl", "a")

    def emit(record):
        history["iterations"].append(record)
        if stream is not None:
            stream.write(json.dumps(record) + "\n")

    def emit_epoch(record):
        history["epochs"].append(record)
        if stream is not None:
            stream.write(json.dumps(record) + "\n")
            stream.flush()

    try:
        while state.epoch < cfg.epochs:
            if state.perm is None:
                state.perm = state.sampler.permutation(len(train_part))
                state.cursor = 0
            while state.cursor < len(state.perm):
                sel = state.perm[state.cursor : state.cursor + cfg.batch_size]
                if len(sel) < 2:
                    break  # batch norm cannot run on a single sample
                images = torch.from_numpy(train_part.images[sel])
                labels = torch.from_numpy(train_part.labels[sel])
                rec1 = phase_one_step(state, images, labels)
                emit({"epoch": state.epoch + 1, "iter": state.iteration, "phase": 1, **rec1})
                rec2 = phase_two_step(state, images, labels)
                emit({"epoch": state.epoch + 1, "iter": state.iteration, "phase": 2, **rec2})
                state.cursor += len(sel)
                state.iteration += 1
            state.perm = None
            state.cursor = 0
            state.epoch += 1
            for sched in state.schedulers:
                sched.step()
            if cfg.eval_every and state.epoch % cfg.eval_every == 0:
                record = {"epoch": state.epoch, **epoch_metrics(state, split, probe_batch)}
                emit_epoch(record)
                if log is not None:
                    log(record)
            if out_dir is not None and (
                (cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0)
                or state.epoch == cfg.epochs
            ):
                save_checkpoint(state, out_dir / f"checkpoint_epoch{state.epoch:04d}.pt")
        if out_dir is not None:
            save_checkpoint(state, out_dir / "checkpoint_final.pt")
    except TrainingDiverged as exc:
        if stream is not None:
            stream.write(json.dumps({"diverged": exc.record}) + "\n")
        raise
    finally:
        if stream is not None:
            stream.close()
    return state, history


def save_checkpoint(state, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state.state_dict(), path)


def load_checkpoint(path):
    """Rebuild a TrainState (networks, optimizers, RNG streams) from disk."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model_config = ModelConfig(**{
        **blob["model_config"],
        "widths": tuple(blob["model_config"]["widths"]),
    })
    train_config = train_config_from_dict(blob["train_config"])
    state = init_state(model_config, train_config)
    state.load_state_dict(blob)
    return state
