"""Classification heads: global average pooling and a single linear layer over
one of the representation variants (CNN GAP; ViT CLS, pooled patch tokens, or
their concatenation).
"""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch
import torch.nn as nn

from .backbones import Backbone, BackboneConfig, CnnBackbone, VitBackbone
from .utils import split_seed

CNN_HEAD_VARIANTS = ("gap",)
VIT_HEAD_VARIANTS = ("cls", "patch_gap", "concat")
HEAD_VARIANTS = CNN_HEAD_VARIANTS + VIT_HEAD_VARIANTS


def gap_pool(rep: torch.Tensor, tokens: bool = False) -> torch.Tensor:
    """Arithmetic mean over all spatial positions (or all patch tokens).

    Zeroed positions count toward the denominator. For tokens=False, rep is a
    feature map (..., D, M, N); for tokens=True, rep is a patch-token matrix
    (..., P, D).
    """
    if tokens:
        if rep.shape[-2] == 0:
            raise ValueError("gap_pool: empty token set")
        return rep.mean(dim=-2)
    if rep.dim() < 3 or rep.shape[-1] == 0 or rep.shape[-2] == 0:
        raise ValueError(f"gap_pool: expected a non-empty (...,D,M,N) map, got {tuple(rep.shape)}")
    return rep.mean(dim=(-2, -1))


def head_input_dim(variant: str, feature_dim: int) -> int:
    if variant not in HEAD_VARIANTS:
        raise ValueError(f"unknown head variant {variant!r}, expected one of {HEAD_VARIANTS}")
    return 2 * feature_dim if variant == "concat" else feature_dim


def build_head(variant: str, feature_dim: int, num_classes: int, seed: int = 0) -> nn.Linear:
    """Single linear layer mapping the pooled representation to class logits."""
    if feature_dim < 1 or num_classes < 1:
        raise ValueError("feature_dim and num_classes must be >= 1")
    torch.manual_seed(split_seed(seed, f"head-init-{variant}"))
    return nn.Linear(head_input_dim(variant, feature_dim), num_classes)


def classify(head: nn.Linear, backbone_output: torch.Tensor, variant: str) -> torch.Tensor:
    """Class logits from a backbone output under the given head variant."""
    if variant == "gap":
        if backbone_output.dim() not in (3, 4):
            raise ValueError(
                f"variant 'gap' needs a feature map, got shape {tuple(backbone_output.shape)}"
            )
        return head(gap_pool(backbone_output))
    if variant not in VIT_HEAD_VARIANTS:
        raise ValueError(f"unknown head variant {variant!r}")
    if backbone_output.dim() not in (2, 3) or backbone_output.shape[-2] < 2:
        raise ValueError(
            f"variant {variant!r} needs a CLS+patch token sequence, got shape "
            f"{tuple(backbone_output.shape)}"
        )
    cls = backbone_output[..., 0, :]
    if variant == "cls":
        return head(cls)
    patch = gap_pool(backbone_output[..., 1:, :], tokens=True)
    if variant == "patch_gap":
        return head(patch)
    return head(torch.cat([cls, patch], dim=-1))


class ClassifierModel(nn.Module):
    """Backbone plus a linear head over one representation variant."""

    def __init__(self, backbone: Backbone, head: nn.Linear, head_variant: str, num_classes: int):
        super().__init__()
        allowed = CNN_HEAD_VARIANTS if backbone.kind == "cnn" else VIT_HEAD_VARIANTS
        if head_variant not in allowed:
            raise ValueError(
                f"head variant {head_variant!r} incompatible with {backbone.kind} backbone; "
                f"expected one of {allowed}"
            )
        expected = head_input_dim(head_variant, backbone.feature_dim)
        if head.in_features != expected:
            raise ValueError(
                f"head input dim {head.in_features} does not match variant "
                f"{head_variant!r} over feature dim {backbone.feature_dim} (expected {expected})"
            )
        self.backbone = backbone
        self.head = head
        self.head_variant = head_variant
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rep = self.backbone.forward_features(x, self.backbone.last_stage)
        return classify(self.head, rep, self.head_variant)


def build_classifier(
    backbone: Backbone, head_variant: str, num_classes: int, seed: int = 0
) -> ClassifierModel:
    head = build_head(head_variant, backbone.feature_dim, num_classes, seed=seed)
    return ClassifierModel(backbone, head, head_variant, num_classes)


def save_classifier(model: ClassifierModel, path: str | Path) -> None:
    torch.save(
        {
            "backbone_config": asdict(model.backbone.config),
            "head_variant": model.head_variant,
            "num_classes": model.num_classes,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_classifier(path: str | Path) -> ClassifierModel:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg_dict = payload["backbone_config"]
    cfg_dict["image_size"] = tuple(cfg_dict["image_size"])
    config = BackboneConfig(**cfg_dict)
    backbone = CnnBackbone(config) if config.kind == "cnn" else VitBackbone(config)
    model = build_classifier(backbone, payload["head_variant"], payload["num_classes"])
    model.load_state_dict(payload["state_dict"])
    return model
