import copy

import numpy as np
import pytest
import torch

from conftest import synthetic_split
from osrsim.losses import LossWeights, cross_entropy, imitation_loss, onehot, open_loss_copycat
from osrsim.models import REAL, GroupIndexSets, ModelConfig, build_classifier
from osrsim.training import (
    TrainingConfig,
    TrainingDiverged,
    init_state,
    load_checkpoint,
    phase_one_step,
    phase_two_step,
    save_checkpoint,
    train,
)

TINY = ModelConfig(num_classes=3, in_channels=1, widths=(4, 6, 8),
                   convs_per_group=1, z_dim=8, gan_width=4)


def tiny_train_config(**overrides):
    defaults: dict = dict(epochs=1, batch_size=8, seed=3, checkpoint_every=0,
                          eval_every=1)
    defaults.update(overrides)
    return TrainingConfig(**defaults)


def batch_from(split, n=8):
    images = torch.from_numpy(split.closed_train.images[:n])
    labels = torch.from_numpy(split.closed_train.labels[:n])
    return images, labels


def snapshot(net):
    return {k: v.clone() for k, v in net.state_dict().items()}


def params_equal(net, snap):
    current = net.state_dict()
    return all(torch.equal(current[k], snap[k]) for k in snap)


class TestPhaseIsolation:
    def test_phase_one_touches_only_copycat_and_classifier(self):
        state = init_state(TINY, tiny_train_config())
        split = synthetic_split()
        gen_before = snapshot(state.generator)
        disc_before = snapshot(state.discriminator)
        copy_before = snapshot(state.copycat)
        cls_before = snapshot(state.classifier)
        phase_one_step(state, *batch_from(split))
        assert params_equal(state.generator, gen_before)
        assert params_equal(state.discriminator, disc_before)
        assert not params_equal(state.copycat, copy_before)
        assert not params_equal(state.classifier, cls_before)

    def test_phase_two_leaves_copycat_untouched(self):
        state = init_state(TINY, tiny_train_config())
        split = synthetic_split()
        copy_before = snapshot(state.copycat)
        cls_before = snapshot(state.classifier)
        phase_two_step(state, *batch_from(split))
        assert params_equal(state.copycat, copy_before)
        assert not params_equal(state.classifier, cls_before)

    def test_discriminator_loss_near_chance_at_init(self):
        state = init_state(TINY, tiny_train_config(seed=5))
        split = synthetic_split()
        rec = phase_two_step(state, *batch_from(split))
        assert abs(rec["disc"] - 2 * np.log(2)) < 0.5


class TestGradientRouting:
    def test_copycat_loss_leaves_classifier_gradient_free(self):
        state = init_state(TINY, tiny_train_config())
        split = synthetic_split()
        images, labels = batch_from(split)
        cls, cop = state.classifier, state.copycat
        with torch.no_grad():
            cls_feats = cls.features(images)
        copy_feats = cop.features(images)
        reg = cross_entropy(onehot(labels, 3), cop.head_probs(copy_feats[-1]))
        (reg + imitation_loss(copy_feats, cls_feats, state.index_sets)).backward()
        assert all(p.grad is None or not p.grad.any() for p in cls.parameters())
        assert any(p.grad is not None and p.grad.any() for p in cop.parameters())

    def test_open_loss_on_fakes_leaves_copycat_gradient_free(self):
        state = init_state(TINY, tiny_train_config())
        split = synthetic_split()
        images, labels = batch_from(split)
        cls, cop = state.classifier, state.copycat
        idx = state.index_sets
        with torch.no_grad():
            feats = cop.features(images)
        probs = [cls.forward_from_group(i, feats[i - 1], bank=REAL) for i in idx.all]
        open_loss_copycat(probs, labels, idx, LossWeights()).backward()
        assert all(p.grad is None or not p.grad.any() for p in cop.parameters())
        assert any(p.grad is not None and p.grad.any() for p in cls.parameters())


class TestLambdaZeroLimit:
    def test_phase_one_classifier_delta_matches_plain_ce_step(self):
        weights = LossWeights(lam=0.0)
        state = init_state(TINY, tiny_train_config(weights=weights))
        ref = init_state(TINY, tiny_train_config(weights=weights))
        split = synthetic_split()
        images, labels = batch_from(split)

        phase_one_step(state, images, labels)

        # reference: plain cross-entropy step with identical optimizer settings
        ref.classifier.train()
        loss = cross_entropy(onehot(labels, 3), ref.classifier(images))
        ref.opt_classifier.zero_grad()
        loss.backward()
        ref.opt_classifier.step()

        for a, b in zip(state.classifier.parameters(), ref.classifier.parameters()):
            assert torch.equal(a, b)

    def test_baseline_mode_equals_lambda_zero_full_loop(self):
        split = synthetic_split(n_train=32)
        weights = LossWeights(lam=0.0)
        _, hist_full = train(TINY, tiny_train_config(weights=weights), split)
        state_full = None  # keep names tidy; we only compare classifiers below
        full_state, _ = train(TINY, tiny_train_config(weights=weights), split)
        base_state, _ = train(
            TINY,
            tiny_train_config(weights=weights, train_generators=False),
            split,
        )
        for a, b in zip(full_state.classifier.parameters(),
                        base_state.classifier.parameters()):
            assert torch.equal(a, b)

    def test_beta_zero_decouples_generator_from_classifier(self):
        split = synthetic_split()
        images, labels = batch_from(split)
        weights = LossWeights(beta=0.0)

        state_a = init_state(TINY, tiny_train_config(weights=weights))
        phase_two_step(state_a, images, labels)

        state_b = init_state(TINY, tiny_train_config(weights=weights))
        with torch.no_grad():  # scramble the classifier; generator must not care
            g = torch.Generator().manual_seed(99)
            for p in state_b.classifier.parameters():
                p.add_(torch.randn(p.shape, generator=g) * 0.1)
        phase_two_step(state_b, images, labels)

        for a, b in zip(state_a.generator.parameters(), state_b.generator.parameters()):
            assert torch.equal(a, b)


class TestDeterminism:
    def test_same_seed_same_loss_trajectory(self):
        split = synthetic_split(n_train=80)
        cfg = tiny_train_config(epochs=1, batch_size=16)
        _, hist_a = train(TINY, copy.deepcopy(cfg), split)
        _, hist_b = train(TINY, copy.deepcopy(cfg), split)
        assert len(hist_a["iterations"]) == 10  # 5 batches x 2 phases
        assert hist_a["iterations"] == hist_b["iterations"]
        assert hist_a["epochs"] == hist_b["epochs"]

    def test_loop_accounting_one_epoch_two_batches(self):
        split = synthetic_split(n_train=16)
        _, hist = train(TINY, tiny_train_config(batch_size=8), split)
        phase1 = [r for r in hist["iterations"] if r["phase"] == 1]
        phase2 = [r for r in hist["iterations"] if r["phase"] == 2]
        assert len(phase1) == 2 and len(phase2) == 2

    def test_checkpoint_resume_is_bit_identical(self, tmp_path):
        split = synthetic_split(n_train=32)

        cfg = tiny_train_config(epochs=2, batch_size=16, checkpoint_every=1)
        _, hist_full = train(TINY, cfg, split, out_dir=tmp_path / "full")

        cfg_half = tiny_train_config(epochs=1, batch_size=16, checkpoint_every=1)
        train(TINY, cfg_half, split, out_dir=tmp_path / "half")
        resumed = load_checkpoint(tmp_path / "half" / "checkpoint_epoch0001.pt")
        resumed.train_config.epochs = 2
        _, hist_tail = train(TINY, resumed.train_config, split, state=resumed)

        full_epoch2 = [r for r in hist_full["iterations"] if r["epoch"] == 2]
        assert full_epoch2 == hist_tail["iterations"]

    def test_state_dict_roundtrip_mid_epoch(self):
        split = synthetic_split(n_train=48)
        cfg = tiny_train_config(epochs=1, batch_size=16)
        state = init_state(TINY, cfg)

        # run two manual iterations, snapshot, then diverge the two copies
        state.perm = state.sampler.permutation(len(split.closed_train))
        images, labels = batch_from(split, 16)
        phase_one_step(state, images, labels)
        blob = state.state_dict()

        twin = init_state(TINY, cfg)
        twin.load_state_dict(blob)
        rec_a = phase_two_step(state, images, labels)
        rec_b = phase_two_step(twin, images, labels)
        assert rec_a == rec_b
        for a, b in zip(state.classifier.parameters(), twin.classifier.parameters()):
            assert torch.equal(a, b)


class TestFailureModes:
    def test_non_finite_input_aborts_with_record(self):
        state = init_state(TINY, tiny_train_config())
        split = synthetic_split()
        images, labels = batch_from(split)
        images = images.clone()
        images[0, 0, 0, 0] = float("nan")
        with pytest.raises(TrainingDiverged) as err:
            phase_one_step(state, images, labels)
        assert err.value.record["phase"] == 1
        assert "epoch" in err.value.record

    def test_empty_training_set_rejected(self):
        split = synthetic_split(n_train=0)
        with pytest.raises(ValueError, match="empty"):
            train(TINY, tiny_train_config(), split)

    def test_class_count_mismatch_rejected(self):
        split = synthetic_split(num_known=4)
        with pytest.raises(ValueError, match="classes"):
            train(TINY, tiny_train_config(), split)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="epochs"):
            TrainingConfig(epochs=0)
        with pytest.raises(ValueError, match="batch_size"):
            TrainingConfig(batch_size=1)
        with pytest.raises(ValueError, match="baseline"):
            TrainingConfig(train_generators=False, weights=LossWeights(lam=0.1))


class TestBatchNormHygiene:
    def test_fake_forwards_leave_real_bank_frozen_params(self):
        """With parameters frozen, routing fakes through the fake bank must not
        move a single real-bank statistic."""
        state = init_state(TINY, tiny_train_config())
        cls = state.classifier
        cls.train()
        real_stats = {k: v.clone() for k, v in cls.state_dict().items() if "_real" in k}
        z = torch.randn(8, TINY.z_dim, generator=state.noise_rng)
        with torch.no_grad():
            fake = state.generator(z)
            cls(fake, bank="fake")
        for k, v in cls.state_dict().items():
            if "_real" in k:
                assert torch.equal(real_stats[k], v), k

    def test_training_updates_both_banks_via_their_routes(self):
        split = synthetic_split()
        state = init_state(TINY, tiny_train_config())
        cls = state.classifier
        before = {k: v.clone() for k, v in cls.state_dict().items() if "mean_" in k}
        phase_one_step(state, *batch_from(split))
        phase_two_step(state, *batch_from(split))
        after = cls.state_dict()
        real_moved = any(
            not torch.equal(before[k], after[k]) for k in before if "_real" in k
        )
        fake_moved = any(
            not torch.equal(before[k], after[k]) for k in before if "_fake" in k
        )
        assert real_moved and fake_moved


def test_probe_imitation_decreases_on_short_run():
    split = synthetic_split(n_train=96, seed=5)
    cfg = tiny_train_config(epochs=6, batch_size=16)
    _, hist = train(TINY, cfg, split)
    probes = [r["probe_imitation"] for r in hist["epochs"]]
    assert probes[-1] < probes[0]
