"""Masking math: image-level (early) masking, mask subsampling onto a feature
grid, feature/token (late) masking, and the strategy dispatcher used by
training and evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .heads import ClassifierModel, classify
from .segmodel import SegmenterModel, predict_masks
from .synthset import SampleRecord, stack_masks
from .utils import check_mask, check_same_spatial

STRATEGY_KINDS = ("baseline", "early", "late")
MASK_SOURCES = ("oracle", "predicted")
SUBSAMPLE_RULES = ("majority", "any")

MaskProvider = Callable[[Sequence[SampleRecord]], torch.Tensor]


@dataclass(frozen=True)
class StrategyConfig:
    """Which masking strategy a classifier uses."""

    kind: str = "baseline"
    stage: str | None = None  # late only
    mask_source: str = "predicted"

    def validate(self, stage_names: Sequence[str] | None = None) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"strategy kind must be one of {STRATEGY_KINDS}, got {self.kind!r}")
        if self.mask_source not in MASK_SOURCES:
            raise ValueError(f"mask_source must be one of {MASK_SOURCES}, got {self.mask_source!r}")
        if self.kind == "late":
            if self.stage is None:
                raise ValueError("late strategy requires a stage")
            if stage_names is not None and self.stage not in stage_names:
                raise ValueError(f"unknown stage {self.stage!r}, expected one of {list(stage_names)}")
        elif self.stage is not None:
            raise ValueError(f"stage is only valid for the late strategy, got kind={self.kind!r}")

    @property
    def needs_mask(self) -> bool:
        return self.kind != "baseline"


def baseline() -> StrategyConfig:
    return StrategyConfig(kind="baseline")


def early(mask_source: str = "predicted") -> StrategyConfig:
    return StrategyConfig(kind="early", mask_source=mask_source)


def late(stage: str, mask_source: str = "predicted") -> StrategyConfig:
    return StrategyConfig(kind="late", stage=stage, mask_source=mask_source)


def apply_early_mask(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero out background pixels: each channel multiplied elementwise by the mask."""
    check_mask(mask)
    check_same_spatial(image, mask, "early mask")
    return image * mask


def subsample_mask(
    mask: torch.Tensor, target_dims: tuple[int, int], rule: str = "majority"
) -> torch.Tensor:
    """Reduce a pixel mask (..., 1, M, N) onto a (M', N') feature grid.

    Each output cell summarizes its block of pixels: rule 'majority' marks the
    cell foreground when at least half the block is foreground, rule 'any' when
    any pixel is. Block counts are compared in integer arithmetic, so the rule
    is exact; in particular subsampling to the mask's own dims returns it
    unchanged.
    """
    check_mask(mask)
    if rule not in SUBSAMPLE_RULES:
        raise ValueError(f"rule must be one of {SUBSAMPLE_RULES}, got {rule!r}")
    m, n = mask.shape[-2], mask.shape[-1]
    mt, nt = target_dims
    if mt <= 0 or nt <= 0 or m % mt or n % nt:
        raise ValueError(f"mask dims {m}x{n} not divisible by target dims {mt}x{nt}")
    kh, kw = m // mt, n // nt
    blocks = mask.reshape(*mask.shape[:-2], mt, kh, nt, kw)
    counts = blocks.sum(dim=(-3, -1))
    if rule == "majority":
        return (2 * counts >= kh * kw).to(mask.dtype)
    return (counts > 0).to(mask.dtype)


def apply_feature_mask(features: torch.Tensor, pmask: torch.Tensor) -> torch.Tensor:
    """Zero the feature vectors at background grid cells (broadcast over channels)."""
    check_mask(pmask, "pmask")
    check_same_spatial(features, pmask, "feature mask")
    return features * pmask


def apply_token_mask(tokens: torch.Tensor, pmask: torch.Tensor) -> torch.Tensor:
    """Zero patch tokens at background grid cells; the CLS token is never masked.

    Token index i+1 corresponds to row-major grid cell i.
    """
    check_mask(pmask, "pmask")
    num_patches = tokens.shape[-2] - 1
    cells = pmask.shape[-2] * pmask.shape[-1]
    if num_patches != cells:
        raise ValueError(f"token count {num_patches} does not match mask grid of {cells} cells")
    flat = pmask.reshape(*pmask.shape[:-3], cells)
    ones = torch.ones((*flat.shape[:-1], 1), dtype=tokens.dtype, device=tokens.device)
    factor = torch.cat([ones, flat.to(tokens.dtype)], dim=-1)
    return tokens * factor.unsqueeze(-1)


def strategy_representation(
    model: ClassifierModel,
    image: torch.Tensor,
    mask: torch.Tensor | None,
    strategy: StrategyConfig,
    subsample_rule: str = "majority",
) -> torch.Tensor:
    """Backbone output fed to the head under the given strategy.

    Baseline ignores the mask. Early multiplies the image by the mask before
    the backbone. Late(s) taps the backbone at stage s, zeroes background
    cells of the subsampled mask, then runs the remaining stages; at stage 0
    this is exactly early masking, at the last stage it masks the tensor fed
    to the head.
    """
    backbone = model.backbone
    strategy.validate(backbone.stage_names)
    if strategy.kind == "baseline":
        return backbone.forward_features(image, backbone.last_stage)
    if mask is None:
        raise ValueError(f"mask missing: strategy {strategy.kind!r} requires one")
    check_same_spatial(image, mask, "strategy mask")
    if strategy.kind == "early":
        return backbone.forward_features(apply_early_mask(image, mask), backbone.last_stage)

    stage = strategy.stage
    rep = backbone.forward_features(image, stage)
    pmask = subsample_mask(mask, backbone.grid_at(stage), rule=subsample_rule)
    if backbone.kind == "vit" and backbone.stage_index(stage) > 0:
        rep = apply_token_mask(rep, pmask)
    else:
        rep = apply_feature_mask(rep, pmask)
    return backbone.forward_from(rep, stage)


def masked_forward(
    model: ClassifierModel,
    image: torch.Tensor,
    mask: torch.Tensor | None,
    strategy: StrategyConfig,
    subsample_rule: str = "majority",
) -> torch.Tensor:
    """Class logits for an image under a masking strategy."""
    rep = strategy_representation(model, image, mask, strategy, subsample_rule=subsample_rule)
    return classify(model.head, rep, model.head_variant)


def oracle_masks(records: Sequence[SampleRecord]) -> torch.Tensor:
    """Ground-truth masks stacked Nx1xHxW."""
    return stack_masks(records)


def predicted_mask_provider(segmenter: SegmenterModel, threshold: float = 0.5) -> MaskProvider:
    """Mask provider that runs the segmenter on each record's image."""

    def provider(records: Sequence[SampleRecord]) -> torch.Tensor:
        return predict_masks(segmenter, records, threshold=threshold)

    return provider


def resolve_mask_provider(
    strategy: StrategyConfig,
    masks_provider: MaskProvider | None = None,
    segmenter: SegmenterModel | None = None,
    threshold: float = 0.5,
) -> MaskProvider | None:
    """Pick the mask source for a strategy: an explicit provider wins, then the
    strategy's declared source (oracle masks, or a segmenter when predicted).
    """
    if masks_provider is not None:
        return masks_provider
    if strategy.mask_source == "oracle":
        return oracle_masks
    if segmenter is not None:
        return predicted_mask_provider(segmenter, threshold=threshold)
    return None
