"""Shared helpers: seed derivation, shape checks, config errors."""
from __future__ import annotations

import hashlib

import torch


class ConfigError(ValueError):
    """Invalid experiment configuration. Message names the offending field."""


def split_seed(root_seed: int, label: str) -> int:
    """Derive a stable child seed from a root seed and a component label.

    Uses SHA-256 so the mapping is identical across platforms and Python
    versions (unlike the builtin hash).
    """
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def check_image(image: torch.Tensor, name: str = "image") -> None:
    """Validate a 3xHxW (or Bx3xHxW) float image with values in [0, 1]."""
    if image.dim() not in (3, 4) or image.shape[-3] != 3:
        raise ValueError(f"{name}: expected (...,3,H,W), got {tuple(image.shape)}")
    h, w = image.shape[-2], image.shape[-1]
    if h < 8 or w < 8:
        raise ValueError(f"{name}: spatial dims must be >= 8, got {h}x{w}")
    if not torch.isfinite(image).all():
        raise ValueError(f"{name}: contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError(f"{name}: values must lie in [0, 1]")


def check_mask(mask: torch.Tensor, name: str = "mask") -> None:
    """Validate a 1xHxW (or Bx1xHxW) binary mask with entries exactly 0 or 1."""
    if mask.dim() not in (3, 4) or mask.shape[-3] != 1:
        raise ValueError(f"{name}: expected (...,1,H,W), got {tuple(mask.shape)}")
    if not torch.logical_or(mask == 0.0, mask == 1.0).all():
        raise ValueError(f"{name}: entries must be exactly 0 or 1")


def check_same_spatial(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(
            f"{what}: spatial dims differ, {tuple(a.shape[-2:])} vs {tuple(b.shape[-2:])}"
        )
