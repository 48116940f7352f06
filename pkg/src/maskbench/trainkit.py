"""Classifier training: frozen-backbone vs full fine-tuning, cosine decay with
linear warmup, label smoothing, and per-segment learning rates for models
masked at an interior stage.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbones import BackboneConfig, Backbone, build_backbone
from .heads import ClassifierModel, build_classifier, classify
from .maskops import MaskProvider, StrategyConfig, baseline, masked_forward, strategy_representation
from .synthset import SampleRecord, labels_tensor, stack_images
from .utils import split_seed

REGIMES = ("frozen", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "frozen"
    epochs: int = 30
    batch_size: int = 32
    classifier_lr: float = 4e-3
    backbone_lr: float | None = None  # finetune only
    pre_mask_lr: float | None = None  # finetune + late at an interior stage
    post_mask_lr: float | None = None
    warmup_epochs: int = 0
    label_smoothing: float = 0.1
    weight_decay: float = 5e-2
    hflip: bool = False
    random_crop: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be > 0, got {self.batch_size}")
        for name in ("classifier_lr", "backbone_lr", "pre_mask_lr", "post_mask_lr"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be > 0, got {value}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(
                f"warmup_epochs must satisfy 0 <= warmup < epochs, got {self.warmup_epochs}/{self.epochs}"
            )
        if self.regime == "frozen":
            for name in ("backbone_lr", "pre_mask_lr", "post_mask_lr"):
                if getattr(self, name) is not None:
                    raise ValueError(f"{name} conflicts with the frozen regime (backbone is not trained)")


@dataclass
class TrainHistory:
    """Per-epoch training trace."""

    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "val_acc", "lr"])
            for i, (loss, acc, lr) in enumerate(zip(self.train_loss, self.val_accuracy, self.lr)):
                writer.writerow([i, f"{loss:.6f}", f"{acc:.4f}", f"{lr:.8f}"])


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then cosine decay to 0."""
    if total_steps <= 0:
        return 0.0
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def smoothed_loss(logits: torch.Tensor, target: torch.Tensor | int, eps: float = 0.1) -> torch.Tensor:
    """Cross-entropy against the label-smoothed target distribution
    (1 - eps + eps/C on the true class, eps/C elsewhere), averaged over the batch.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must be in [0, 1), got {eps}")
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    if not torch.is_tensor(target):
        target = torch.tensor([target])
    target = target.reshape(-1).long()
    num_classes = logits.shape[-1]
    if (target < 0).any() or (target >= num_classes).any():
        raise ValueError(f"target out of range [0, {num_classes})")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    uniform = -logp.mean(dim=-1)
    return ((1.0 - eps) * nll + eps * uniform).mean()


def _augment_batch(
    rng: np.random.Generator,
    images: torch.Tensor,
    masks: torch.Tensor | None,
    cfg: TrainConfig,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Horizontal flip and reflect-pad random crop, applied jointly to images
    and masks so the mask stays aligned (and exactly binary)."""
    n = images.shape[0]
    if cfg.hflip:
        flip = torch.from_numpy(rng.random(n) < 0.5)
        images = torch.where(flip.view(-1, 1, 1, 1), images.flip(-1), images)
        if masks is not None:
            masks = torch.where(flip.view(-1, 1, 1, 1), masks.flip(-1), masks)
    if cfg.random_crop:
        h, w = images.shape[-2:]
        pad = max(2, min(h, w) // 8)
        images_p = F.pad(images, (pad, pad, pad, pad), mode="reflect")
        masks_p = F.pad(masks, (pad, pad, pad, pad), mode="reflect") if masks is not None else None
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
        images = torch.stack(
            [images_p[i, :, oy : oy + h, ox : ox + w] for i, (oy, ox) in enumerate(offsets)]
        )
        if masks_p is not None:
            masks = torch.stack(
                [masks_p[i, :, oy : oy + h, ox : ox + w] for i, (oy, ox) in enumerate(offsets)]
            )
    return images, masks


def _param_groups(
    model: ClassifierModel, cfg: TrainConfig, strategy: StrategyConfig
) -> list[dict]:
    """AdamW parameter groups. The head group always comes last.

    Fine-tuning uses separate backbone/classifier learning rates. When masking
    at a backbone stage, the backbone is split at the mask: parameters before
    it use pre_mask_lr, parameters after it (and the head) use post_mask_lr.
    """
    head_params = list(model.head.parameters())
    if cfg.regime == "frozen":
        return [{"params": head_params, "lr": cfg.classifier_lr}]

    backbone_lr = cfg.backbone_lr if cfg.backbone_lr is not None else cfg.classifier_lr
    if strategy.kind == "late":
        idx = model.backbone.stage_index(strategy.stage)
        segments = model.backbone.segment_parameters()
        pre = [p for seg in segments[:idx] for p in seg]
        post = [p for seg in segments[idx:] for p in seg]
        pre_lr = cfg.pre_mask_lr if cfg.pre_mask_lr is not None else backbone_lr
        post_lr = cfg.post_mask_lr if cfg.post_mask_lr is not None else cfg.classifier_lr
        groups = []
        if pre:
            groups.append({"params": pre, "lr": pre_lr})
        if post:
            groups.append({"params": post, "lr": post_lr})
        groups.append({"params": head_params, "lr": post_lr})
        return groups
    return [
        {"params": list(model.backbone.parameters()), "lr": backbone_lr},
        {"params": head_params, "lr": cfg.classifier_lr},
    ]


def _accuracy_pct(
    model: ClassifierModel,
    images: torch.Tensor,
    masks: torch.Tensor | None,
    labels: torch.Tensor,
    strategy: StrategyConfig,
    batch_size: int,
) -> float:
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            logits = masked_forward(model, images[sl], None if masks is None else masks[sl], strategy)
            pred = logits.numpy().argmax(axis=-1)
            correct += int((pred == labels[sl].numpy()).sum())
    return 100.0 * correct / len(images)


def train_classifier(
    model: ClassifierModel,
    records: Sequence[SampleRecord],
    cfg: TrainConfig,
    strategy: StrategyConfig | None = None,
    masks_provider: MaskProvider | None = None,
    val_records: Sequence[SampleRecord] | None = None,
) -> tuple[ClassifierModel, TrainHistory]:
    """Train a classifier under a masking strategy.

    Frozen regime trains only the head (backbone parameters are untouched
    bit-for-bit); when no augmentation is enabled this caches the backbone
    representations once and trains the head on them, which is numerically
    identical to recomputing the forward pass. Deterministic given
    (cfg, strategy, records).
    """
    strategy = strategy or baseline()
    cfg.validate()
    strategy.validate(model.backbone.stage_names)
    if not records:
        raise ValueError("train_classifier: empty training set")

    masks = None
    val_masks = None
    if strategy.needs_mask:
        if masks_provider is None and strategy.mask_source == "oracle":
            from .maskops import oracle_masks

            masks_provider = oracle_masks
        if masks_provider is None:
            raise ValueError(
                f"masks missing: strategy {strategy.kind!r} with mask_source "
                f"{strategy.mask_source!r} requires a masks_provider"
            )
        masks = masks_provider(records)
        if val_records:
            val_masks = masks_provider(val_records)

    history = TrainHistory()
    if cfg.epochs == 0:
        return model, history

    images = stack_images(records)
    labels = labels_tensor(records)
    val_images = stack_images(val_records) if val_records else None
    val_labels = labels_tensor(val_records) if val_records else None

    if cfg.regime == "frozen":
        model.backbone.requires_grad_(False)
    groups = _param_groups(model, cfg, strategy)
    base_lrs = [g["lr"] for g in groups]
    opt = torch.optim.AdamW(groups, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)

    n = len(records)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    use_cache = cfg.regime == "frozen" and not cfg.hflip and not cfg.random_crop
    cached_reps = None
    if use_cache:
        reps = []
        with torch.no_grad():
            for start in range(0, n, cfg.batch_size):
                sl = slice(start, start + cfg.batch_size)
                reps.append(
                    strategy_representation(model, images[sl], None if masks is None else masks[sl], strategy)
                )
        cached_reps = torch.cat(reps)

    rng = np.random.default_rng(split_seed(cfg.seed, "train-order"))
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        history.lr.append(lr_at(step, total_steps, warmup_steps, base_lrs[-1]))
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            for group, base in zip(opt.param_groups, base_lrs):
                group["lr"] = lr_at(step, total_steps, warmup_steps, base)
            if cached_reps is not None:
                logits = classify(model.head, cached_reps[idx], model.head_variant)
            else:
                batch_images = images[idx]
                batch_masks = masks[idx] if masks is not None else None
                if cfg.hflip or cfg.random_crop:
                    batch_images, batch_masks = _augment_batch(rng, batch_images, batch_masks, cfg)
                logits = masked_forward(model, batch_images, batch_masks, strategy)
            loss = smoothed_loss(logits, labels[idx], cfg.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            epoch_losses.append(loss.item())
        history.train_loss.append(float(np.mean(epoch_losses)))
        if val_images is not None:
            history.val_accuracy.append(
                _accuracy_pct(model, val_images, val_masks, val_labels, strategy, cfg.batch_size)
            )
        else:
            history.val_accuracy.append(float("nan"))
    return model, history


def pretrain_backbone(
    records: Sequence[SampleRecord],
    backbone_cfg: BackboneConfig,
    cfg: TrainConfig,
    num_classes: int,
    head_variant: str | None = None,
    val_records: Sequence[SampleRecord] | None = None,
) -> tuple[Backbone, TrainHistory]:
    """Train a baseline classifier from scratch and return its backbone.

    Stands in for generic pretrained weights: run it on the unbiased pretrain
    split, then freeze the result for linear-probe experiments.
    """
    if cfg.regime != "finetune":
        raise ValueError("pretraining trains the whole network; use regime='finetune'")
    if head_variant is None:
        head_variant = "gap" if backbone_cfg.kind == "cnn" else "concat"
    backbone = build_backbone(backbone_cfg)
    model = build_classifier(backbone, head_variant, num_classes, seed=cfg.seed)
    model, history = train_classifier(model, records, cfg, baseline(), val_records=val_records)
    return model.backbone, history


def clone_config(cfg: TrainConfig, **overrides) -> TrainConfig:
    return replace(cfg, **overrides)
