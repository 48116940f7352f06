"""Toy feature extractors with named intermediate stages: a staged CNN with
known cumulative downsampling and a small ViT with CLS + patch tokens. Both
expose forward_features / forward_from so computation can be split at any
stage for feature-level masking.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .utils import split_seed

IMAGE_STAGE = "stage0"


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "cnn"  # cnn | vit
    image_size: tuple[int, int] = (64, 64)
    width: int = 16  # cnn stem width / vit embedding dim
    num_stages: int = 3  # cnn
    stem_downsample: int = 4  # cnn
    stage_downsample: int = 2  # cnn
    patch_size: int = 8  # vit
    num_blocks: int = 6  # vit
    num_heads: int = 4  # vit
    seed: int = 0

    def validate(self) -> None:
        h, w = self.image_size
        if self.kind == "cnn":
            if self.num_stages < 1:
                raise ValueError(f"num_stages must be >= 1, got {self.num_stages}")
            k = self.stem_downsample * self.stage_downsample**self.num_stages
            if h % k or w % k:
                raise ValueError(
                    f"image_size {self.image_size} not divisible by the cumulative "
                    f"downsampling ratio {k}"
                )
        elif self.kind == "vit":
            if self.num_blocks < 1:
                raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
            if h % self.patch_size or w % self.patch_size:
                raise ValueError(
                    f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
                )
            if self.width % self.num_heads:
                raise ValueError(
                    f"width {self.width} not divisible by num_heads {self.num_heads}"
                )
        else:
            raise ValueError(f"kind must be 'cnn' or 'vit', got {self.kind!r}")
        if self.width <= 0:
            raise ValueError(f"width must be positive, got {self.width}")


def _conv_unit(channels: int) -> nn.Sequential:
    groups = 4 if channels % 4 == 0 else 1
    return nn.Sequential(
        nn.Conv2d(channels, channels, 3, padding=1),
        nn.GroupNorm(groups, channels),
        nn.GELU(),
    )


class CnnBackbone(nn.Module):
    """Stem (x stem_downsample) followed by num_stages stages, each a strided
    downsampling conv (doubling the width) plus two conv units.
    """

    kind = "cnn"

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        w = config.width
        segments = []
        in_ch = w
        for i in range(config.num_stages):
            layers: list[nn.Module] = []
            if i == 0:
                layers += [
                    nn.Conv2d(3, w, config.stem_downsample, stride=config.stem_downsample),
                    nn.GroupNorm(4 if w % 4 == 0 else 1, w),
                    nn.GELU(),
                ]
            out_ch = in_ch * 2
            layers.append(nn.Conv2d(in_ch, out_ch, config.stage_downsample, stride=config.stage_downsample))
            layers += [_conv_unit(out_ch), _conv_unit(out_ch)]
            segments.append(nn.Sequential(*layers))
            in_ch = out_ch
        self.segments = nn.ModuleList(segments)
        self.feature_dim = in_ch

    @property
    def stage_names(self) -> list[str]:
        return [IMAGE_STAGE] + [f"stage{i + 1}" for i in range(self.config.num_stages)]

    @property
    def last_stage(self) -> str:
        return self.stage_names[-1]

    def stage_index(self, stage: str) -> int:
        names = self.stage_names
        if stage not in names:
            raise ValueError(f"unknown stage '{stage}', expected one of {names}")
        return names.index(stage)

    def downsampling_at(self, stage: str) -> int:
        idx = self.stage_index(stage)
        if idx == 0:
            return 1
        return self.config.stem_downsample * self.config.stage_downsample**idx

    def grid_at(self, stage: str) -> tuple[int, int]:
        k = self.downsampling_at(stage)
        h, w = self.config.image_size
        return h // k, w // k

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if tuple(x.shape[-2:]) != tuple(self.config.image_size):
            raise ValueError(
                f"input size {tuple(x.shape[-2:])} does not match config {self.config.image_size}"
            )
        return x

    def forward_features(self, x: torch.Tensor, tap_stage: str | None = None) -> torch.Tensor:
        """Representation after tap_stage (default: last stage). Stage 0 is the input."""
        tap_stage = tap_stage or self.last_stage
        idx = self.stage_index(tap_stage)
        squeeze = x.dim() == 3
        out = self._check_input(x)
        for segment in self.segments[:idx]:
            out = segment(out)
        return out[0] if squeeze else out

    def forward_from(self, rep: torch.Tensor, tap_stage: str) -> torch.Tensor:
        """Run the stages after tap_stage on a (possibly masked) representation."""
        idx = self.stage_index(tap_stage)
        squeeze = rep.dim() == 3
        out = rep.unsqueeze(0) if squeeze else rep
        for segment in self.segments[idx:]:
            out = segment(out)
        return out[0] if squeeze else out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x, self.last_stage)

    def segment_parameters(self) -> list[list[nn.Parameter]]:
        """Trainable parameters grouped by stage segment, in forward order."""
        return [list(segment.parameters()) for segment in self.segments]


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a = self.norm1(x)
        x = x + self.attn(a, a, a, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class VitBackbone(nn.Module):
    """Patch embedding (norm-linear-norm over flattened patches), learned
    positional embeddings, a prepended CLS token and num_blocks pre-norm
    transformer blocks. The final LayerNorm belongs to the last block's
    segment, so the last tap is exactly the tensor fed to the head.
    """

    kind = "vit"

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.width
        p = config.patch_size
        h, w = config.image_size
        self.grid = (h // p, w // p)
        self.num_patches = self.grid[0] * self.grid[1]
        self.patch_embed = nn.Sequential(
            nn.LayerNorm(3 * p * p),
            nn.Linear(3 * p * p, d),
            nn.LayerNorm(d),
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches + 1, d))
        self.blocks = nn.ModuleList(TransformerBlock(d, config.num_heads) for _ in range(config.num_blocks))
        self.norm = nn.LayerNorm(d)
        self.feature_dim = d
        self._init_parameters()

    def _init_parameters(self) -> None:
        # small-init transformer weights; the default torch init stalls at this scale
        def init_module(module: nn.Module) -> None:
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.MultiheadAttention):
                nn.init.trunc_normal_(module.in_proj_weight, std=0.02)
                nn.init.zeros_(module.in_proj_bias)

        self.apply(init_module)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    @property
    def stage_names(self) -> list[str]:
        return [IMAGE_STAGE] + [f"block{i + 1}" for i in range(self.config.num_blocks)]

    @property
    def last_stage(self) -> str:
        return self.stage_names[-1]

    def stage_index(self, stage: str) -> int:
        names = self.stage_names
        if stage not in names:
            raise ValueError(f"unknown stage '{stage}', expected one of {names}")
        return names.index(stage)

    def grid_at(self, stage: str) -> tuple[int, int]:
        if self.stage_index(stage) == 0:
            return self.config.image_size
        return self.grid

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if tuple(x.shape[-2:]) != tuple(self.config.image_size):
            raise ValueError(
                f"input size {tuple(x.shape[-2:])} does not match config {self.config.image_size}"
            )
        return x

    def _embed(self, x: torch.Tensor) -> torch.Tensor:
        p = self.config.patch_size
        # row-major patch order, matching the token <-> grid index mapping
        patches = F.unfold(x, kernel_size=p, stride=p).transpose(1, 2)  # B x P x 3p^2
        tokens = self.patch_embed(patches)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def forward_features(self, x: torch.Tensor, tap_stage: str | None = None) -> torch.Tensor:
        """Token sequence after tap_stage (index 0 is CLS). Stage 0 is the input image."""
        tap_stage = tap_stage or self.last_stage
        idx = self.stage_index(tap_stage)
        squeeze = x.dim() == 3
        out = self._check_input(x)
        if idx == 0:
            return out[0] if squeeze else out
        tokens = self._embed(out)
        for block in self.blocks[:idx]:
            tokens = block(tokens)
        if idx == len(self.blocks):
            tokens = self.norm(tokens)
        return tokens[0] if squeeze else tokens

    def forward_from(self, rep: torch.Tensor, tap_stage: str) -> torch.Tensor:
        idx = self.stage_index(tap_stage)
        squeeze = rep.dim() == (3 if idx == 0 else 2)
        out = rep.unsqueeze(0) if squeeze else rep
        if idx == 0:
            out = self._embed(out)
        for block in self.blocks[idx:]:
            out = block(out)
        if idx < len(self.blocks):
            out = self.norm(out)
        return out[0] if squeeze else out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x, self.last_stage)

    def segment_parameters(self) -> list[list[nn.Parameter]]:
        """Parameters grouped per block segment. The patch embedding, CLS token
        and positional embeddings belong to the first segment; the final norm
        to the last.
        """
        groups = []
        for i, block in enumerate(self.blocks):
            params = list(block.parameters())
            if i == 0:
                params = list(self.patch_embed.parameters()) + [self.cls_token, self.pos_embed] + params
            if i == len(self.blocks) - 1:
                params = params + list(self.norm.parameters())
            groups.append(params)
        return groups


Backbone = CnnBackbone | VitBackbone


def build_backbone(config: BackboneConfig) -> Backbone:
    """Construct a backbone with deterministic initialization from config.seed."""
    config.validate()
    torch.manual_seed(split_seed(config.seed, "backbone-init"))
    if config.kind == "cnn":
        return CnnBackbone(config)
    return VitBackbone(config)


def tokens_to_grid(patch_tokens: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Rearrange row-major patch tokens (..., P, D) into a spatial map (..., D, M, N)."""
    m, n = grid
    if patch_tokens.shape[-2] != m * n:
        raise ValueError(f"token count {patch_tokens.shape[-2]} does not match grid {grid}")
    return patch_tokens.transpose(-1, -2).reshape(*patch_tokens.shape[:-2], patch_tokens.shape[-1], m, n)


def grid_to_tokens(grid_map: torch.Tensor) -> torch.Tensor:
    """Inverse of tokens_to_grid: (..., D, M, N) into row-major (..., P, D)."""
    d, m, n = grid_map.shape[-3:]
    return grid_map.reshape(*grid_map.shape[:-3], d, m * n).transpose(-1, -2)


def save_backbone(backbone: Backbone, path: str | Path) -> None:
    torch.save({"config": asdict(backbone.config), "state_dict": backbone.state_dict()}, path)


def load_backbone(path: str | Path) -> Backbone:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg_dict = payload["config"]
    cfg_dict["image_size"] = tuple(cfg_dict["image_size"])
    config = BackboneConfig(**cfg_dict)
    backbone = CnnBackbone(config) if config.kind == "cnn" else VitBackbone(config)
    backbone.load_state_dict(payload["state_dict"])
    return backbone
