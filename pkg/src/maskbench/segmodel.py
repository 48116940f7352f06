"""Binary FG-BG segmentation: a small encoder-decoder trained on ground-truth
masks, mask prediction by thresholding, and Dice evaluation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthset import SampleRecord, by_split, stack_images, stack_masks
from .utils import check_image, check_mask, check_same_spatial, split_seed


@dataclass(frozen=True)
class SegTrainConfig:
    width: int = 16
    epochs: int = 12
    lr: float = 2e-3
    batch_size: int = 16
    weight_decay: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0 or self.batch_size <= 0 or self.width <= 0:
            raise ValueError("lr, batch_size and width must be positive")


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(min(4, cout), cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(min(4, cout), cout),
        nn.ReLU(inplace=True),
    )


class SegmenterModel(nn.Module):
    """Symmetric encoder-decoder with 3 downsampling levels and skip connections.

    Maps Bx3xHxW images to Bx1xHxW foreground logits; H and W must be
    divisible by 8.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.width = width
        self.enc0 = _conv_block(3, w)
        self.enc1 = _conv_block(w, 2 * w)
        self.enc2 = _conv_block(2 * w, 4 * w)
        self.bottleneck = _conv_block(4 * w, 4 * w)
        self.up2 = nn.ConvTranspose2d(4 * w, 4 * w, 2, stride=2)
        self.dec2 = _conv_block(8 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, 2 * w, 2, stride=2)
        self.dec1 = _conv_block(4 * w, w)
        self.up0 = nn.ConvTranspose2d(w, w, 2, stride=2)
        self.dec0 = _conv_block(2 * w, w)
        self.out = nn.Conv2d(w, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"segmenter input dims must be divisible by 8, got {h}x{w}")
        e0 = self.enc0(x)
        e1 = self.enc1(F.max_pool2d(e0, 2))
        e2 = self.enc2(F.max_pool2d(e1, 2))
        b = self.bottleneck(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        d0 = self.dec0(torch.cat([self.up0(d1), e0], dim=1))
        return self.out(d0)


def build_segmenter(width: int = 16, seed: int = 0) -> SegmenterModel:
    torch.manual_seed(split_seed(seed, "segmenter-init"))
    return SegmenterModel(width=width)


def train_segmenter(
    records: Sequence[SampleRecord], config: SegTrainConfig
) -> tuple[SegmenterModel, list[float]]:
    """Train on per-pixel binary cross-entropy against ground-truth masks.

    Returns the model and the per-epoch mean training loss. Deterministic
    given (config, records).
    """
    config.validate()
    if not records:
        raise ValueError("train_segmenter: empty training set")
    model = build_segmenter(width=config.width, seed=config.seed)
    if config.epochs == 0:
        return model, []

    images = stack_images(records)
    masks = stack_masks(records)
    rng = np.random.default_rng(split_seed(config.seed, "segmenter-batches"))
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    loss_fn = nn.BCEWithLogitsLoss()

    history: list[float] = []
    n = len(records)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy())
            logits = model(images[idx])
            loss = loss_fn(logits, masks[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return model, history


def predict_mask(model: SegmenterModel, image: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Binary mask from the model's per-pixel foreground probability.

    An entry is 1 exactly when its probability is >= threshold.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    check_image(image)
    squeeze = image.dim() == 3
    batch = image.unsqueeze(0) if squeeze else image
    with torch.no_grad():
        probs = torch.sigmoid(model(batch))
    mask = (probs >= threshold).float()
    return mask[0] if squeeze else mask


def predict_masks(
    model: SegmenterModel,
    records: Sequence[SampleRecord],
    threshold: float = 0.5,
    batch_size: int = 64,
) -> torch.Tensor:
    """Predicted masks for a record sequence, stacked Nx1xHxW."""
    outs = []
    for start in range(0, len(records), batch_size):
        batch = stack_images(records[start : start + batch_size])
        outs.append(predict_mask(model, batch, threshold))
    return torch.cat(outs)


def binarize_probabilities(probs: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (probs >= threshold).float()


def dice(pred: torch.Tensor, gt: torch.Tensor, cls: str = "fg") -> float:
    """Dice overlap 2|X&Y| / (|X|+|Y|) for the foreground or background class.

    Defined as 1.0 when both pixel sets are empty.
    """
    if cls not in ("fg", "bg"):
        raise ValueError(f"cls must be 'fg' or 'bg', got {cls!r}")
    check_mask(pred, "pred")
    check_mask(gt, "gt")
    check_same_spatial(pred, gt, "dice pred/gt")
    value = 1.0 if cls == "fg" else 0.0
    x = pred == value
    y = gt == value
    denom = int(x.sum()) + int(y.sum())
    if denom == 0:
        return 1.0
    return 2 * int((x & y).sum()) / denom


@dataclass
class DiceScores:
    fg: float
    bg: float


@dataclass
class DiceReport:
    """Mean Dice per split, separately for the foreground and background class."""

    splits: dict[str, DiceScores] = field(default_factory=dict)


def evaluate_segmenter(
    model: SegmenterModel,
    records: Sequence[SampleRecord],
    threshold: float = 0.5,
    batch_size: int = 64,
) -> DiceReport:
    if not records:
        raise ValueError("evaluate_segmenter: empty record set")
    report = DiceReport()
    for split, recs in by_split(records).items():
        preds = predict_masks(model, recs, threshold=threshold, batch_size=batch_size)
        fg_scores = [dice(preds[i], recs[i].mask, "fg") for i in range(len(recs))]
        bg_scores = [dice(preds[i], recs[i].mask, "bg") for i in range(len(recs))]
        report.splits[split] = DiceScores(fg=float(np.mean(fg_scores)), bg=float(np.mean(bg_scores)))
    return report


def save_segmenter(model: SegmenterModel, config: SegTrainConfig, path: str | Path) -> None:
    torch.save({"config": asdict(config), "state_dict": model.state_dict()}, path)


def load_segmenter(path: str | Path) -> tuple[SegmenterModel, SegTrainConfig]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = SegTrainConfig(**payload["config"])
    model = SegmenterModel(width=config.width)
    model.load_state_dict(payload["state_dict"])
    return model, config
