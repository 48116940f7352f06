import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from maskbench.segmodel import (
    DiceReport,
    SegTrainConfig,
    binarize_probabilities,
    build_segmenter,
    dice,
    evaluate_segmenter,
    load_segmenter,
    predict_mask,
    save_segmenter,
    train_segmenter,
)
from maskbench.synthset import SampleRecord

from conftest import assert_tensors_equal


def _mask(arr) -> torch.Tensor:
    return torch.tensor(arr, dtype=torch.float32).unsqueeze(0)


def _brute_force_dice(pred: torch.Tensor, gt: torch.Tensor, cls: str) -> float:
    """Independent oracle: enumerate the pixel sets and count."""
    value = 1.0 if cls == "fg" else 0.0
    x = {(i, j) for i in range(pred.shape[1]) for j in range(pred.shape[2]) if pred[0, i, j] == value}
    y = {(i, j) for i in range(gt.shape[1]) for j in range(gt.shape[2]) if gt[0, i, j] == value}
    if len(x) + len(y) == 0:
        return 1.0
    return 2 * len(x & y) / (len(x) + len(y))


class TestDice:
    def test_identical_masks(self):
        m = _mask(np.eye(8, dtype=np.float32))
        assert dice(m, m, "fg") == 1.0
        assert dice(m, m, "bg") == 1.0

    def test_disjoint_sets(self):
        a = np.zeros((8, 8), dtype=np.float32)
        b = np.zeros((8, 8), dtype=np.float32)
        a[:2] = 1.0
        b[4:6] = 1.0
        assert dice(_mask(a), _mask(b), "fg") == 0.0

    def test_half_overlap(self):
        # |X| = 4, |Y| = 4, |X & Y| = 2 -> 0.5 by pixel enumeration
        a = np.zeros((8, 8), dtype=np.float32)
        b = np.zeros((8, 8), dtype=np.float32)
        a[0, 0:4] = 1.0
        b[0, 2:6] = 1.0
        assert dice(_mask(a), _mask(b), "fg") == 0.5
        assert _brute_force_dice(_mask(a), _mask(b), "fg") == 0.5

    def test_both_empty_defined_as_one(self):
        z = _mask(np.zeros((8, 8), dtype=np.float32))
        assert dice(z, z, "fg") == 1.0

    def test_matches_brute_force_on_random_pairs(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            a = _mask((rng.random((8, 8)) < rng.random()).astype(np.float32))
            b = _mask((rng.random((8, 8)) < rng.random()).astype(np.float32))
            for cls in ("fg", "bg"):
                assert dice(a, b, cls) == _brute_force_dice(a, b, cls)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = _mask((rng.random((8, 8)) < 0.5).astype(np.float32))
            b = _mask((rng.random((8, 8)) < 0.5).astype(np.float32))
            d = dice(a, b, "fg")
            assert d == dice(b, a, "fg")
            assert 0.0 <= d <= 1.0

    def test_bad_class_rejected(self):
        m = _mask(np.zeros((8, 8), dtype=np.float32))
        with pytest.raises(ValueError, match="fg"):
            dice(m, m, "object")

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dice(_mask(np.zeros((8, 8), dtype=np.float32)), _mask(np.zeros((8, 10), dtype=np.float32)))


class _FixedLogits(nn.Module):
    """Segmenter stand-in returning a constant logit map."""

    def __init__(self, logits: torch.Tensor):
        super().__init__()
        self.logits = logits

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1, -1, -1)


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


class TestPredictMask:
    def test_all_high_probability_gives_all_ones(self):
        model = _FixedLogits(torch.full((1, 1, 8, 8), _logit(0.9)))
        mask = predict_mask(model, torch.rand(3, 8, 8), threshold=0.5)
        assert_tensors_equal(mask, torch.ones(1, 8, 8))

    def test_threshold_above_max_gives_all_zeros(self):
        model = _FixedLogits(torch.full((1, 1, 8, 8), _logit(0.6)))
        mask = predict_mask(model, torch.rand(3, 8, 8), threshold=0.7)
        assert_tensors_equal(mask, torch.zeros(1, 8, 8))

    def test_threshold_oracle_on_known_probs(self):
        probs = torch.tensor([[0.4, 0.6]])
        assert_tensors_equal(binarize_probabilities(probs, 0.5), torch.tensor([[0.0, 1.0]]))
        # boundary: probability exactly at the threshold counts as foreground
        assert binarize_probabilities(torch.tensor([0.5]), 0.5).item() == 1.0

    def test_binarizing_twice_is_idempotent(self):
        rng = np.random.default_rng(1)
        probs = torch.from_numpy(rng.random((1, 8, 8), dtype=np.float32))
        once = binarize_probabilities(probs)
        assert_tensors_equal(binarize_probabilities(once), once)
        assert set(once.unique().tolist()) <= {0.0, 1.0}

    def test_invalid_threshold_rejected(self):
        model = _FixedLogits(torch.zeros(1, 1, 8, 8))
        for tau in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError, match="threshold"):
                predict_mask(model, torch.rand(3, 8, 8), threshold=tau)


def _toy_seg_records(n: int, size: int = 32, split: str = "train", seed: int = 0) -> list[SampleRecord]:
    """Bright shapes on a dark noisy texture: separable by construction."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        mask = np.zeros((size, size), dtype=np.float32)
        r = rng.integers(5, size // 3)
        cy, cx = rng.integers(r, size - r, size=2)
        yy, xx = np.ogrid[:size, :size]
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r**2] = 1.0
        dark = rng.uniform(0.0, 0.25, size=(3, size, size)).astype(np.float32)
        bright = rng.uniform(0.75, 1.0, size=(3, size, size)).astype(np.float32)
        image = np.where(mask[None] > 0, bright, dark)
        records.append(
            SampleRecord(
                image=torch.from_numpy(image),
                mask=torch.from_numpy(mask).unsqueeze(0),
                label=0,
                bg_family=0,
                split=split,
            )
        )
    return records


class TestTrainSegmenter:
    def test_zero_epochs_keeps_initialization(self):
        records = _toy_seg_records(4)
        cfg = SegTrainConfig(width=8, epochs=0, seed=7)
        model, history = train_segmenter(records, cfg)
        assert history == []
        reference = build_segmenter(width=8, seed=7)
        for p, q in zip(model.parameters(), reference.parameters()):
            assert_tensors_equal(p, q)

    def test_same_seed_reproducible(self):
        records = _toy_seg_records(8)
        cfg = SegTrainConfig(width=8, epochs=2, seed=3)
        m1, h1 = train_segmenter(records, cfg)
        m2, h2 = train_segmenter(records, cfg)
        assert h1 == h2
        for p, q in zip(m1.parameters(), m2.parameters()):
            assert_tensors_equal(p, q)

    def test_loss_decreases(self):
        records = _toy_seg_records(16)
        model, history = train_segmenter(records, SegTrainConfig(width=8, epochs=5, seed=0))
        assert history[-1] <= history[0]

    def test_separable_toy_reaches_high_dice(self):
        train = _toy_seg_records(32, seed=0)
        val = _toy_seg_records(8, split="val", seed=1)
        model, _ = train_segmenter(train, SegTrainConfig(width=8, epochs=20, lr=3e-3, seed=0))
        report = evaluate_segmenter(model, val)
        assert report.splits["val"].fg >= 0.95

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train_segmenter([], SegTrainConfig())

    def test_negative_epochs_rejected(self):
        with pytest.raises(ValueError, match="epochs"):
            SegTrainConfig(epochs=-1).validate()


class _GroundTruthFromImage(nn.Module):
    """Predicts foreground where the image is bright; exact on the toy set."""

    def forward(self, x):
        return x.mean(dim=1, keepdim=True) * 20.0 - 10.0


class _AlwaysBackground(nn.Module):
    def forward(self, x):
        return torch.full((x.shape[0], 1, *x.shape[-2:]), -10.0)


class TestEvaluateSegmenter:
    def test_ground_truth_copier_scores_one(self):
        records = _toy_seg_records(6)
        report = evaluate_segmenter(_GroundTruthFromImage(), records)
        assert report.splits["train"].fg == 1.0
        assert report.splits["train"].bg == 1.0

    def test_constant_background_predictor_scores_zero_fg(self):
        records = _toy_seg_records(6)
        report = evaluate_segmenter(_AlwaysBackground(), records)
        assert report.splits["train"].fg == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate_segmenter(_AlwaysBackground(), [])

    def test_report_is_per_split(self):
        records = _toy_seg_records(4, split="train") + _toy_seg_records(4, split="val", seed=9)
        report = evaluate_segmenter(_GroundTruthFromImage(), records)
        assert set(report.splits) == {"train", "val"}
        assert isinstance(report, DiceReport)


def test_checkpoint_roundtrip(tmp_path):
    records = _toy_seg_records(4)
    cfg = SegTrainConfig(width=8, epochs=1, seed=2)
    model, _ = train_segmenter(records, cfg)
    path = tmp_path / "seg.pt"
    save_segmenter(model, cfg, path)
    loaded, loaded_cfg = load_segmenter(path)
    assert loaded_cfg == cfg
    for p, q in zip(model.parameters(), loaded.parameters()):
        assert_tensors_equal(p, q)
