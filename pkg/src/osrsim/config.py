"""Experiment configuration: a JSON document with sections mirroring the
library modules. Unknown sections or keys are hard errors, named explicitly."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .models import GroupIndexSets, ModelConfig
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


_NoneType = type(None)

# section -> key -> (allowed types, default)
_SCHEMA = {
    "data": {
        "dataset": (str, "mnist"),
        "root": (str, "data/mnist"),
        "open_root": ((str, _NoneType), None),
        "protocol": (str, "auroc"),
        "trial": (int, 0),
        "max_train_per_class": ((int, _NoneType), None),
    },
    "models": {
        "n_groups": (int, 3),
        "convs_per_group": (int, 3),
        "widths": (list, [64, 128, 196]),
        "z_dim": (int, 100),
        "gan_width": (int, 64),
        "in_channels": (int, 1),
        "image_size": (int, 32),
    },
    "losses": {
        "lam": ((int, float), 0.1),
        "beta": ((int, float), 0.1),
        "alpha_hard": ((int, float), 0.5),
        "alpha_easy": ((int, float), 1.0),
        "hard_groups": ((list, _NoneType), None),
        "easy_groups": ((list, _NoneType), None),
    },
    "training": {
        "epochs": (int, 100),
        "batch_size": (int, 128),
        "lr_classifier": ((int, float), 0.01),
        "lr_copycat": ((int, float), 0.01),
        "momentum": ((int, float), 0.9),
        "cosine_decay": (bool, True),
        "lr_gan": ((int, float), 2e-4),
        "adam_beta1": ((int, float), 0.5),
        "adam_beta2": ((int, float), 0.999),
        "checkpoint_every": (int, 10),
        "eval_every": (int, 1),
        "train_generators": (bool, True),
    },
    "inference": {
        "epsilon": ((int, float), -0.05),
    },
}

_TOP_LEVEL = {
    "seed": (int, 0),
    "out": ((str, _NoneType), None),
}


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    inference: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None

    def resolved(self):
        """Full config dict with every default filled in."""
        d = {name: dict(getattr(self, name)) for name in _SCHEMA}
        d["seed"] = self.seed
        d["out"] = self.out
        return d

    def hash(self):
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_config(self, num_classes):
        m = self.models
        return ModelConfig(
            num_classes=num_classes,
            in_channels=m["in_channels"],
            image_size=m["image_size"],
            n_groups=m["n_groups"],
            convs_per_group=m["convs_per_group"],
            widths=tuple(m["widths"]),
            z_dim=m["z_dim"],
            gan_width=m["gan_width"],
        )

    def loss_weights(self):
        l = self.losses
        return LossWeights(
            lam=float(l["lam"]),
            beta=float(l["beta"]),
            alpha_hard=float(l["alpha_hard"]),
            alpha_easy=float(l["alpha_easy"]),
        )

    def index_sets(self):
        l = self.losses
        if l["hard_groups"] is None and l["easy_groups"] is None:
            return GroupIndexSets.default(self.models["n_groups"])
        if l["hard_groups"] is None or l["easy_groups"] is None:
            raise ConfigError("hard_groups and easy_groups must be given together")
        return GroupIndexSets(hard=tuple(l["hard_groups"]), easy=tuple(l["easy_groups"]))

    def training_config(self):
        t = self.training
        return TrainingConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            lr_classifier=float(t["lr_classifier"]),
            lr_copycat=float(t["lr_copycat"]),
            momentum=float(t["momentum"]),
            cosine_decay=t["cosine_decay"],
            lr_gan=float(t["lr_gan"]),
            adam_beta1=float(t["adam_beta1"]),
            adam_beta2=float(t["adam_beta2"]),
            seed=self.seed,
            checkpoint_every=t["checkpoint_every"],
            eval_every=t["eval_every"],
            weights=self.loss_weights(),
            index_sets=self.index_sets(),
            train_generators=t["train_generators"],
        )

    @property
    def epsilon(self):
        return float(self.inference["epsilon"])


def parse_config(raw):
    """Validate a raw dict against the schema; unknown keys are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    sections = {}
    for name, value in raw.items():
        if name in _TOP_LEVEL:
            continue
        if name not in _SCHEMA:
            raise ConfigError(f"unknown config section {name!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {name!r} must be an object")
    for section, keys in _SCHEMA.items():
        given = raw.get(section, {})
        for key in given:
            if key not in keys:
                raise ConfigError(f"unknown config key {key!r} in section {section!r}")
        resolved = {}
        for key, (types, default) in keys.items():
            value = given.get(key, copy.deepcopy(default))
            if isinstance(types, tuple):
                ok = isinstance(value, types) and not (
                    isinstance(value, bool) and bool not in types
                )
            else:
                ok = isinstance(value, types) and not (
                    isinstance(value, bool) and types is not bool
                )
            if not ok:
                raise ConfigError(
                    f"config key {key!r} in section {section!r} has invalid type "
                    f"{type(value).__name__}"
                )
            resolved[key] = value
        sections[section] = resolved
    top = {}
    for key, (types, default) in _TOP_LEVEL.items():
        value = raw.get(key, default)
        types_t = types if isinstance(types, tuple) else (types,)
        if not isinstance(value, types_t) or (isinstance(value, bool) and bool not in types_t):
            raise ConfigError(f"top-level config key {key!r} has invalid type")
        top[key] = value
    return ExperimentConfig(
        data=sections["data"],
        models=sections["models"],
        losses=sections["losses"],
        training=sections["training"],
        inference=sections["inference"],
        seed=top["seed"],
        out=top["out"],
    )


def load_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(raw)
