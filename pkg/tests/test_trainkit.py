import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from maskbench.backbones import build_backbone
from maskbench.heads import build_classifier
from maskbench.maskops import baseline, early, late, oracle_masks
from maskbench.synthset import SampleRecord
from maskbench.trainkit import (
    TrainConfig,
    _param_groups,
    lr_at,
    pretrain_backbone,
    smoothed_loss,
    train_classifier,
)
from maskbench.trainkit import _augment_batch

from conftest import assert_tensors_equal


class TestLrSchedule:
    def test_end_of_warmup_hits_base_lr(self):
        assert lr_at(20, 100, 20, 0.1) == pytest.approx(0.1)

    def test_final_step_is_zero(self):
        assert lr_at(100, 100, 20, 0.1) == pytest.approx(0.0, abs=1e-12)

    def test_halfway_through_decay(self):
        # (1 + cos(pi/2)) / 2 = 1/2
        assert lr_at(60, 100, 20, 0.1) == pytest.approx(0.05)

    def test_linear_ramp(self):
        assert lr_at(0, 100, 20, 0.1) == 0.0
        assert lr_at(10, 100, 20, 0.1) == pytest.approx(0.05)

    def test_continuous_at_boundary(self):
        base = 0.3
        ramp_side = base * 19 / 20
        assert lr_at(19, 100, 20, base) == pytest.approx(ramp_side)
        assert lr_at(20, 100, 20, base) == pytest.approx(base)

    def test_no_warmup_starts_at_base(self):
        assert lr_at(0, 50, 0, 0.2) == pytest.approx(0.2)

    def test_monotone_decay_after_warmup(self):
        values = [lr_at(s, 200, 10, 1.0) for s in range(10, 201)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestSmoothedLoss:
    def test_zero_smoothing_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        logits = torch.from_numpy(rng.standard_normal((4, 5)).astype(np.float32))
        target = torch.tensor([0, 2, 4, 1])
        ours = smoothed_loss(logits, target, 0.0)
        assert ours.item() == pytest.approx(F.cross_entropy(logits, target).item(), rel=1e-6)

    def test_two_class_target_distribution(self):
        # C=2, eps=0.1 -> target distribution (0.95, 0.05)
        logits = torch.tensor([1.2, -0.7])
        logp = F.log_softmax(logits, dim=-1)
        expected = -(0.95 * logp[0] + 0.05 * logp[1])
        assert smoothed_loss(logits, 0, 0.1).item() == pytest.approx(expected.item(), rel=1e-6)

    def test_uniform_logits_give_log_c(self):
        for c in (2, 5, 8):
            logits = torch.zeros(c)
            for eps in (0.0, 0.1, 0.5):
                assert smoothed_loss(logits, 1, eps).item() == pytest.approx(math.log(c), rel=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            logits = torch.from_numpy(rng.standard_normal(6)).double().requires_grad_(True)
            target = int(rng.integers(0, 6))
            eps = float(rng.uniform(0.0, 0.5))
            loss = smoothed_loss(logits, target, eps)
            loss.backward()
            h = 1e-6
            for i in range(6):
                bumped = logits.detach().clone()
                bumped[i] += h
                dipped = logits.detach().clone()
                dipped[i] -= h
                fd = (smoothed_loss(bumped, target, eps) - smoothed_loss(dipped, target, eps)) / (2 * h)
                rel = abs(fd.item() - logits.grad[i].item()) / max(abs(fd.item()), 1e-8)
                assert rel <= 1e-5

    def test_gradient_closed_form(self):
        # d loss / d logits = softmax(logits) - smoothed target
        logits = torch.tensor([0.3, -1.2, 2.0], requires_grad=True)
        eps = 0.2
        smoothed_loss(logits, 2, eps).backward()
        q = torch.full((3,), eps / 3)
        q[2] += 1 - eps
        assert torch.allclose(logits.grad, torch.softmax(logits.detach(), -1) - q, atol=1e-6)

    def test_target_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            smoothed_loss(torch.zeros(3), 3, 0.1)

    def test_bad_eps_rejected(self):
        with pytest.raises(ValueError, match="eps"):
            smoothed_loss(torch.zeros(3), 0, 1.0)


def _separable_records(n: int, size: int = 32, split: str = "train", seed: int = 0) -> list[SampleRecord]:
    """Two classes split by foreground brightness; linearly separable."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        label = i % 2
        mask = np.zeros((size, size), dtype=np.float32)
        cy, cx = rng.integers(8, size - 8, size=2)
        mask[cy - 6 : cy + 6, cx - 6 : cx + 6] = 1.0
        level = 0.85 if label else 0.15
        fg = np.clip(rng.normal(level, 0.03, size=(3, size, size)), 0, 1).astype(np.float32)
        bg = rng.uniform(0.4, 0.6, size=(3, size, size)).astype(np.float32)
        image = np.where(mask[None] > 0, fg, bg)
        records.append(SampleRecord(torch.from_numpy(image), torch.from_numpy(mask)[None], label, 0, split))
    return records


class TestTrainConfig:
    def test_frozen_with_backbone_lr_is_conflict(self):
        with pytest.raises(ValueError, match="frozen"):
            TrainConfig(regime="frozen", backbone_lr=1e-4).validate()

    def test_warmup_must_be_below_epochs(self):
        with pytest.raises(ValueError, match="warmup"):
            TrainConfig(epochs=5, warmup_epochs=5).validate()

    def test_bad_smoothing_rejected(self):
        with pytest.raises(ValueError, match="label_smoothing"):
            TrainConfig(label_smoothing=1.0).validate()

    def test_zero_epochs_allows_zero_warmup(self):
        TrainConfig(epochs=0, warmup_epochs=0).validate()


class TestTrainClassifier:
    def test_zero_epochs_model_unchanged(self, cnn32_model, tiny_records):
        before = [p.detach().clone() for p in cnn32_model.parameters()]
        model, history = train_classifier(
            cnn32_model, tiny_records[:8], TrainConfig(epochs=0, regime="finetune"), baseline()
        )
        assert history.train_loss == [] and history.val_accuracy == [] and history.lr == []
        for p, q in zip(model.parameters(), before):
            assert_tensors_equal(p, q)

    def test_frozen_backbone_untouched(self, cnn32_model):
        records = _separable_records(16)
        before = [p.detach().clone() for p in cnn32_model.backbone.parameters()]
        head_before = cnn32_model.head.weight.detach().clone()
        cfg = TrainConfig(regime="frozen", epochs=5, batch_size=8, seed=0)
        model, history = train_classifier(cnn32_model, records, cfg, baseline())
        for p, q in zip(model.backbone.parameters(), before):
            assert_tensors_equal(p, q)
        assert not torch.equal(model.head.weight, head_before)
        assert len(history.train_loss) == 5

    def test_frozen_backbone_untouched_with_augmentation(self, cnn32_model):
        records = _separable_records(16)
        before = [p.detach().clone() for p in cnn32_model.backbone.parameters()]
        cfg = TrainConfig(regime="frozen", epochs=2, batch_size=8, hflip=True, random_crop=True, seed=0)
        model, _ = train_classifier(cnn32_model, records, cfg, baseline())
        for p, q in zip(model.backbone.parameters(), before):
            assert_tensors_equal(p, q)

    def test_deterministic_given_seed(self, cnn32_config):
        records = _separable_records(16)
        results = []
        for _ in range(2):
            model = build_classifier(build_backbone(cnn32_config), "gap", 2, seed=4)
            cfg = TrainConfig(regime="finetune", epochs=2, batch_size=8, classifier_lr=1e-3, seed=9)
            model, history = train_classifier(model, records, cfg, early(mask_source="oracle"))
            results.append((history, [p.detach().clone() for p in model.parameters()]))
        (h1, p1), (h2, p2) = results
        assert h1.train_loss == h2.train_loss and h1.lr == h2.lr
        for a, b in zip(p1, p2):
            assert_tensors_equal(a, b)

    def test_separable_toy_reaches_high_accuracy(self, cnn32_config):
        train = _separable_records(64, seed=0)
        val = _separable_records(32, split="val", seed=1)
        model = build_classifier(build_backbone(cnn32_config), "gap", 2, seed=0)
        cfg = TrainConfig(regime="finetune", epochs=30, batch_size=16, classifier_lr=2e-3, backbone_lr=2e-3, seed=0)
        model, history = train_classifier(model, train, cfg, baseline(), val_records=val)
        assert max(history.val_accuracy) >= 95.0

    def test_missing_masks_rejected(self, cnn32_model, tiny_records):
        with pytest.raises(ValueError, match="masks missing"):
            train_classifier(cnn32_model, tiny_records[:8], TrainConfig(epochs=1), early())

    def test_oracle_source_uses_record_masks(self, cnn32_model, tiny_records):
        cfg = TrainConfig(regime="frozen", epochs=1, batch_size=8)
        _, history = train_classifier(cnn32_model, tiny_records[:8], cfg, early(mask_source="oracle"))
        assert len(history.train_loss) == 1

    def test_empty_records_rejected(self, cnn32_model):
        with pytest.raises(ValueError, match="empty"):
            train_classifier(cnn32_model, [], TrainConfig(epochs=1), baseline())

    def test_history_lengths_match_epochs(self, cnn32_model):
        records = _separable_records(16)
        cfg = TrainConfig(regime="frozen", epochs=3, batch_size=8)
        _, history = train_classifier(cnn32_model, records, cfg, baseline(), val_records=records[:8])
        assert len(history.train_loss) == len(history.val_accuracy) == len(history.lr) == 3

    def test_history_csv(self, cnn32_model, tmp_path):
        records = _separable_records(8)
        cfg = TrainConfig(regime="frozen", epochs=2, batch_size=8)
        _, history = train_classifier(cnn32_model, records, cfg, baseline())
        out = tmp_path / "history.csv"
        history.to_csv(out)
        lines = out.read_text().splitlines()
        assert lines[0] == "epoch,loss,val_acc,lr"
        assert len(lines) == 3


class TestParameterGroups:
    def test_finetune_uses_distinct_lrs(self, cnn32_model):
        cfg = TrainConfig(regime="finetune", classifier_lr=4e-3, backbone_lr=4e-6)
        groups = _param_groups(cnn32_model, cfg, baseline())
        assert len(groups) == 2
        assert groups[0]["lr"] == 4e-6 and groups[1]["lr"] == 4e-3
        assert {id(p) for p in groups[0]["params"]} == {id(p) for p in cnn32_model.backbone.parameters()}
        assert {id(p) for p in groups[1]["params"]} == {id(p) for p in cnn32_model.head.parameters()}

    def test_late_interior_stage_splits_backbone_at_mask(self, cnn32_model):
        cfg = TrainConfig(regime="finetune", classifier_lr=1e-3, pre_mask_lr=1e-5, post_mask_lr=1e-2)
        groups = _param_groups(cnn32_model, cfg, late("stage2"))
        assert [g["lr"] for g in groups] == [1e-5, 1e-2, 1e-2]
        segments = cnn32_model.backbone.segment_parameters()
        pre_ids = {id(p) for seg in segments[:2] for p in seg}
        post_ids = {id(p) for seg in segments[2:] for p in seg}
        assert {id(p) for p in groups[0]["params"]} == pre_ids
        assert {id(p) for p in groups[1]["params"]} == post_ids
        # the head belongs to the post-mask group's learning rate
        assert {id(p) for p in groups[2]["params"]} == {id(p) for p in cnn32_model.head.parameters()}

    def test_late_at_image_level_has_no_pre_group(self, cnn32_model):
        cfg = TrainConfig(regime="finetune", classifier_lr=1e-3, post_mask_lr=2e-3)
        groups = _param_groups(cnn32_model, cfg, late("stage0"))
        assert len(groups) == 2  # whole backbone after the mask, plus the head
        total = sum(len(g["params"]) for g in groups)
        assert total == len(list(cnn32_model.parameters()))

    def test_late_at_last_stage_has_no_post_backbone_group(self, vit32_model):
        cfg = TrainConfig(regime="finetune", classifier_lr=1e-3, pre_mask_lr=5e-4)
        groups = _param_groups(vit32_model, cfg, late(vit32_model.backbone.last_stage))
        assert len(groups) == 2
        assert {id(p) for p in groups[0]["params"]} == {id(p) for p in vit32_model.backbone.parameters()}

    def test_vit_segments_cover_all_parameters(self, vit32_model):
        segments = vit32_model.backbone.segment_parameters()
        seg_ids = {id(p) for seg in segments for p in seg}
        assert seg_ids == {id(p) for p in vit32_model.backbone.parameters()}


class TestAugmentation:
    def test_masks_stay_binary_and_aligned(self):
        records = _separable_records(8)
        images = torch.stack([r.image for r in records])
        masks = torch.stack([r.mask for r in records])
        rng = np.random.default_rng(0)
        cfg = TrainConfig(hflip=True, random_crop=True)
        out_images, out_masks = _augment_batch(rng, images, masks, cfg)
        assert out_images.shape == images.shape and out_masks.shape == masks.shape
        assert set(out_masks.unique().tolist()) <= {0.0, 1.0}

    def test_flip_applied_jointly(self):
        # an asymmetric sample: if the image flipped, the mask must have too
        image = torch.zeros(1, 3, 8, 8)
        image[:, :, :, :4] = 1.0
        mask = torch.zeros(1, 1, 8, 8)
        mask[:, :, :, :4] = 1.0
        cfg = TrainConfig(hflip=True, random_crop=False)
        for seed in range(6):
            rng = np.random.default_rng(seed)
            out_image, out_mask = _augment_batch(rng, image, mask, cfg)
            assert_tensors_equal(out_image[:, :1], out_mask)


def test_pretrain_backbone_requires_finetune(cnn32_config, tiny_records):
    with pytest.raises(ValueError, match="finetune"):
        pretrain_backbone(tiny_records, cnn32_config, TrainConfig(regime="frozen", epochs=1), 2)


def test_pretrain_backbone_runs(cnn32_config):
    records = _separable_records(16, split="pretrain")
    cfg = TrainConfig(regime="finetune", epochs=1, batch_size=8, classifier_lr=1e-3, seed=0)
    backbone, history = pretrain_backbone(records, cnn32_config, cfg, 2)
    assert backbone.kind == "cnn"
    assert len(history.train_loss) == 1
