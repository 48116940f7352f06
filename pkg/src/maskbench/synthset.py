"""Synthetic biased fine-grained dataset: shape foregrounds composited onto
procedural texture backgrounds with a controllable class<->background
correlation, plus disk import/export in a simple PNG + CSV layout.
"""
from __future__ import annotations

import colorsys
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .utils import check_image, check_mask, check_same_spatial

SPLITS = ("pretrain", "train", "val", "id_test", "ood_test")

# class variants: vertex count x notch flag x aspect ratio
_VERTEX_CHOICES = (3, 4, 5, 6)
_ASPECT_CHOICES = (1.0, 0.7)
MAX_SHAPE_VARIANTS = len(_VERTEX_CHOICES) * 2 * len(_ASPECT_CHOICES)

_NOTCH_RADIUS_FRAC = 0.45
_TEXTURE_KINDS = ("stripes", "checker", "blobs", "gradient_noise")


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters of the synthetic biased dataset."""

    num_classes: int = 8
    num_bg_families: int = 8
    bias_strength: float = 0.95
    image_size: tuple[int, int] = (64, 64)
    split_sizes: Mapping[str, int] = field(
        default_factory=lambda: {
            "pretrain": 512,
            "train": 512,
            "val": 128,
            "id_test": 128,
            "ood_test": 128,
        }
    )
    seed: int = 0
    fg_area_band: tuple[float, float] = (0.1, 0.6)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > MAX_SHAPE_VARIANTS:
            raise ValueError(
                f"num_classes={self.num_classes} exceeds the "
                f"{MAX_SHAPE_VARIANTS} realizable shape variants"
            )
        if self.num_bg_families < 2:
            raise ValueError(f"num_bg_families must be >= 2, got {self.num_bg_families}")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise ValueError(f"bias_strength must be in [0, 1], got {self.bias_strength}")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image_size must be >= 8x8, got {h}x{w}")
        for name, size in self.split_sizes.items():
            if name not in SPLITS:
                raise ValueError(f"unknown split '{name}', expected one of {SPLITS}")
            if size <= 0:
                raise ValueError(f"split size for '{name}' must be > 0, got {size}")
        lo, hi = self.fg_area_band
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(f"fg_area_band must satisfy 0 < lo < hi < 1, got {self.fg_area_band}")


@dataclass
class SampleRecord:
    """One dataset sample: image, ground-truth FG mask, label, background family."""

    image: torch.Tensor  # 3xHxW float32 in [0, 1]
    mask: torch.Tensor  # 1xHxW float32, entries exactly 0 or 1
    label: int
    bg_family: int
    split: str

    def validate(self, num_classes: int | None = None, num_families: int | None = None) -> None:
        check_image(self.image)
        check_mask(self.mask)
        check_same_spatial(self.image, self.mask, "record image/mask")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split '{self.split}'")
        if self.label < 0 or (num_classes is not None and self.label >= num_classes):
            raise ValueError(f"label {self.label} out of range")
        if self.bg_family < 0 or (num_families is not None and self.bg_family >= num_families):
            raise ValueError(f"bg_family {self.bg_family} out of range")


def designated_family(label: int, num_bg_families: int) -> int:
    """Background family spuriously associated with a class."""
    return label % num_bg_families


def composite(foreground: torch.Tensor, mask: torch.Tensor, background: torch.Tensor) -> torch.Tensor:
    """Pixel-exact paste: foreground where mask=1, background where mask=0."""
    if foreground.shape != background.shape:
        raise ValueError(
            f"foreground/background shape mismatch: {tuple(foreground.shape)} vs {tuple(background.shape)}"
        )
    check_mask(mask)
    check_same_spatial(foreground, mask, "composite image/mask")
    return torch.where(mask.bool(), foreground, background)


# ---------------------------------------------------------------------------
# foreground shapes


def shape_variant(label: int) -> tuple[int, bool, float]:
    """(vertex count, notch flag, aspect ratio) for a class index."""
    vertices = _VERTEX_CHOICES[label % 4]
    notch = (label // 4) % 2 == 1
    aspect = _ASPECT_CHOICES[(label // 8) % 2]
    return vertices, notch, aspect


def _polygon_area_unit(vertices: int) -> float:
    # regular polygon with circumradius 1
    return 0.5 * vertices * math.sin(2.0 * math.pi / vertices)


def _render_shape(
    rng: np.random.Generator, spec: DatasetSpec, label: int
) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize the class shape. Returns (foreground HxWx3, mask HxW) float32."""
    h, w = spec.image_size
    vertices, notch, aspect = shape_variant(label)
    lo, hi = spec.fg_area_band
    unit_area = _polygon_area_unit(vertices) * aspect
    radius_cap = (min(h, w) - 4) / 2.0
    frac_cap = unit_area * radius_cap**2 / (h * w)

    target_hi = min(hi - 0.05, 0.95 * frac_cap)
    target_lo = lo + 0.02
    if target_hi <= target_lo:
        raise ValueError(
            f"image_size {spec.image_size} too small to place class-{label} shapes "
            f"with area fraction in {spec.fg_area_band}"
        )

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    for _ in range(16):
        target = rng.uniform(target_lo, target_hi)
        if notch:
            target = min(target / 0.85, 0.95 * frac_cap)
        radius = math.sqrt(target * h * w / unit_area)
        rot = rng.uniform(0.0, 2.0 * math.pi)
        extent = radius * max(aspect, 1.0)
        cy = rng.uniform(extent + 1, h - 2 - extent)
        cx = rng.uniform(extent + 1, w - 2 - extent)

        angles = rot + 2.0 * math.pi * np.arange(vertices) / vertices
        vx = cx + radius * aspect * np.cos(angles)
        vy = cy + radius * np.sin(angles)

        # convex fill: point left of every CCW edge
        inside = np.ones((h, w), dtype=bool)
        for i in range(vertices):
            j = (i + 1) % vertices
            ex, ey = vx[j] - vx[i], vy[j] - vy[i]
            cross = ex * (yy - vy[i]) - ey * (xx - vx[i])
            inside &= cross >= 0.0
        if notch:
            nr = _NOTCH_RADIUS_FRAC * radius
            bite = (xx - vx[0]) ** 2 + (yy - vy[0]) ** 2 <= nr**2
            inside &= ~bite

        frac = inside.mean()
        if lo <= frac <= hi and inside.any():
            break
    else:
        raise RuntimeError(
            f"could not place a class-{label} shape with area fraction in {spec.fg_area_band}"
        )

    # class-independent body fill: warm grey with slight per-sample tint and speckle
    base = np.array([0.55, 0.47, 0.38], dtype=np.float32)
    tint = rng.uniform(-0.08, 0.08, size=3).astype(np.float32)
    speckle = rng.uniform(-0.05, 0.05, size=(h, w, 1)).astype(np.float32)
    fg = np.clip(base + tint + speckle, 0.0, 1.0).astype(np.float32)
    return fg, inside.astype(np.float32)


# ---------------------------------------------------------------------------
# background textures


def _family_palette(family: int) -> tuple[np.ndarray, np.ndarray]:
    hue = (family * 0.61803398875) % 1.0
    c1 = colorsys.hsv_to_rgb(hue, 0.70, 0.85)
    c2 = colorsys.hsv_to_rgb((hue + 0.33) % 1.0, 0.55, 0.40)
    return np.array(c1, dtype=np.float32), np.array(c2, dtype=np.float32)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Bilinearly upsampled coarse Gaussian noise, HxW float32."""
    ch = max(2, h // cell + 1)
    cw = max(2, w // cell + 1)
    coarse = torch.from_numpy(rng.standard_normal((1, 1, ch, cw)).astype(np.float32))
    fine = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=True)
    return fine[0, 0].numpy()


def _render_background(rng: np.random.Generator, spec: DatasetSpec, family: int) -> np.ndarray:
    """Procedural texture for a background family, HxWx3 float32 in [0, 1]."""
    h, w = spec.image_size
    kind = _TEXTURE_KINDS[family % len(_TEXTURE_KINDS)]
    c1, c2 = _family_palette(family)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)

    if kind == "stripes":
        angle = rng.uniform(0.0, math.pi)
        wavelength = rng.uniform(6.0, 12.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        wave = np.sin(2.0 * math.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / wavelength + phase)
        t = (wave > 0.0).astype(np.float32)[..., None]
    elif kind == "checker":
        cell = int(rng.integers(5, 11))
        ox = int(rng.integers(0, cell))
        oy = int(rng.integers(0, cell))
        t = ((((xx + ox) // cell) + ((yy + oy) // cell)) % 2).astype(np.float32)[..., None]
    elif kind == "blobs":
        t = (_smooth_noise(rng, h, w, cell=8) > 0.0).astype(np.float32)[..., None]
    else:  # gradient_noise
        field = _smooth_noise(rng, h, w, cell=12)
        span = field.max() - field.min()
        t = ((field - field.min()) / (span + 1e-8)).astype(np.float32)[..., None]

    tex = t * c1 + (1.0 - t) * c2
    tex = tex + rng.uniform(-0.02, 0.02, size=(h, w, 3)).astype(np.float32)
    return np.clip(tex, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset generation


def _draw_bg_family(rng: np.random.Generator, spec: DatasetSpec, label: int, split: str) -> int:
    beta = designated_family(label, spec.num_bg_families)
    others = [f for f in range(spec.num_bg_families) if f != beta]
    if split == "pretrain":
        return int(rng.integers(0, spec.num_bg_families))
    if split == "ood_test":
        return others[int(rng.integers(0, len(others)))]
    if rng.random() < spec.bias_strength:
        return beta
    return others[int(rng.integers(0, len(others)))]


def render_sample_parts(
    spec: DatasetSpec, split: str, index: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, int, int]:
    """Deterministically render one sample's (foreground, mask, background, label, bg_family).

    Pure in (spec.seed, split, index), so samples may be generated in any order
    or in parallel.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split '{split}'")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(SPLITS.index(split), index)))
    label = index % spec.num_classes
    bg_family = _draw_bg_family(rng, spec, label, split)
    fg_np, mask_np = _render_shape(rng, spec, label)
    bg_np = _render_background(rng, spec, bg_family)
    fg = torch.from_numpy(fg_np).permute(2, 0, 1).contiguous()
    bg = torch.from_numpy(bg_np).permute(2, 0, 1).contiguous()
    mask = torch.from_numpy(mask_np).unsqueeze(0)
    return fg, mask, bg, label, bg_family


def generate_record(spec: DatasetSpec, split: str, index: int) -> SampleRecord:
    fg, mask, bg, label, bg_family = render_sample_parts(spec, split, index)
    image = composite(fg, mask, bg)
    return SampleRecord(image=image, mask=mask, label=label, bg_family=bg_family, split=split)


def generate_dataset(spec: DatasetSpec) -> list[SampleRecord]:
    """Generate all splits of the synthetic dataset.

    Labels are balanced per split (round-robin). Background families follow the
    split policy: uniform in pretrain, matching the class's designated family
    with probability bias_strength in train/val/id_test, and uniform over the
    non-designated families in ood_test. Deterministic given spec.seed.
    """
    spec.validate()
    records: list[SampleRecord] = []
    for split in SPLITS:
        size = spec.split_sizes.get(split, 0)
        for index in range(size):
            records.append(generate_record(spec, split, index))
    return records


def split_records(records: Sequence[SampleRecord], split: str) -> list[SampleRecord]:
    return [r for r in records if r.split == split]


def by_split(records: Sequence[SampleRecord]) -> dict[str, list[SampleRecord]]:
    out: dict[str, list[SampleRecord]] = {}
    for r in records:
        out.setdefault(r.split, []).append(r)
    return out


def measure_bias(
    records: Sequence[SampleRecord], num_bg_families: int | None = None
) -> dict[str, float]:
    """Empirical P(bg_family == designated family of the label), per split.

    num_bg_families defaults to the largest family index seen plus one.
    """
    if not records:
        raise ValueError("measure_bias: empty record set")
    if num_bg_families is None:
        num_bg_families = max(max(r.bg_family for r in records) + 1, 2)
    hits: dict[str, int] = {}
    totals: dict[str, int] = {}
    for r in records:
        totals[r.split] = totals.get(r.split, 0) + 1
        if r.bg_family == designated_family(r.label, num_bg_families):
            hits[r.split] = hits.get(r.split, 0) + 1
    return {split: hits.get(split, 0) / total for split, total in totals.items()}


def stack_images(records: Sequence[SampleRecord]) -> torch.Tensor:
    return torch.stack([r.image for r in records])


def stack_masks(records: Sequence[SampleRecord]) -> torch.Tensor:
    return torch.stack([r.mask for r in records])


def labels_tensor(records: Sequence[SampleRecord]) -> torch.Tensor:
    return torch.tensor([r.label for r in records], dtype=torch.long)


# ---------------------------------------------------------------------------
# disk layout: images/<id>.png, masks/<id>.png, labels.csv


def _to_uint8(image: torch.Tensor) -> np.ndarray:
    return np.clip(np.rint(image.permute(1, 2, 0).numpy() * 255.0), 0, 255).astype(np.uint8)


def export_dataset(records: Sequence[SampleRecord], path: str | Path) -> None:
    """Write records as 8-bit PNGs plus a labels.csv manifest."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    counters: dict[str, int] = {}
    rows = []
    for r in records:
        idx = counters.get(r.split, 0)
        counters[r.split] = idx + 1
        rid = f"{r.split}-{idx:05d}"
        PILImage.fromarray(_to_uint8(r.image), mode="RGB").save(root / "images" / f"{rid}.png")
        mask8 = (r.mask[0].numpy() * 255.0).astype(np.uint8)
        PILImage.fromarray(mask8, mode="L").save(root / "masks" / f"{rid}.png")
        rows.append((rid, r.label, r.bg_family, r.split))
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "bg_family", "split"])
        writer.writerows(rows)


def load_directory(path: str | Path) -> list[SampleRecord]:
    """Ingest a dataset directory in the export_dataset layout.

    Masks are 8-bit grayscale, binarized at 0.5 (>=128 means foreground).
    """
    root = Path(path)
    manifest = root / "labels.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"label manifest not found: {manifest}")
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "label", "bg_family", "split"} <= set(reader.fieldnames):
            raise ValueError(f"{manifest}: expected header id,label,bg_family,split")
        rows = list(reader)

    listed = {row["id"] for row in rows}
    for img_path in sorted((root / "images").glob("*.png")):
        if img_path.stem not in listed:
            raise ValueError(f"label not in manifest for image '{img_path.name}'")

    records = []
    for row in rows:
        rid = row["id"]
        img_path = root / "images" / f"{rid}.png"
        mask_path = root / "masks" / f"{rid}.png"
        if not img_path.is_file():
            raise FileNotFoundError(f"image file missing for '{rid}': {img_path}")
        if not mask_path.is_file():
            raise FileNotFoundError(f"mask file missing for image '{rid}': {mask_path}")
        img = np.asarray(PILImage.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        mask_raw = np.asarray(PILImage.open(mask_path).convert("L"), dtype=np.float32) / 255.0
        if img.shape[:2] != mask_raw.shape:
            raise ValueError(
                f"mask/image size mismatch for '{rid}': {mask_raw.shape} vs {img.shape[:2]}"
            )
        if row["split"] not in SPLITS:
            raise ValueError(f"unknown split '{row['split']}' for '{rid}'")
        record = SampleRecord(
            image=torch.from_numpy(img).permute(2, 0, 1).contiguous(),
            mask=torch.from_numpy((mask_raw >= 0.5).astype(np.float32)).unsqueeze(0),
            label=int(row["label"]),
            bg_family=int(row["bg_family"]),
            split=row["split"],
        )
        record.validate()
        records.append(record)
    return records
