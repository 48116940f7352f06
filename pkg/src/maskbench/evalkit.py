"""Evaluation structures: the 2x2 train/test masking accuracy matrix over
ID/OOD test sets, stage sweeps, head sweeps, and the ordering checker.
"""
from __future__ import annotations

import copy
import statistics
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .backbones import Backbone
from .heads import ClassifierModel, build_classifier
from .maskops import (
    MaskProvider,
    StrategyConfig,
    apply_early_mask,
    baseline,
    late,
    masked_forward,
    oracle_masks,
)
from .synthset import SampleRecord, labels_tensor, stack_images
from .trainkit import TrainConfig, TrainHistory, train_classifier

TEST_MASKINGS = ("original", "masked")
DATASET_KEYS = ("id_test", "ood_test")


@dataclass
class EvalReport:
    """Accuracy (percent) per (dataset, test-time masking) cell."""

    cells: dict[tuple[str, str], float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        for dataset in DATASET_KEYS:
            for masking in TEST_MASKINGS:
                if (dataset, masking) not in self.cells:
                    raise ValueError(f"missing cell ({dataset}, {masking})")
        for key, value in self.cells.items():
            if not 0.0 <= value <= 100.0:
                raise ValueError(f"cell {key} out of [0, 100]: {value}")


def _resolve_masks(
    records: Sequence[SampleRecord],
    strategy: StrategyConfig,
    test_masking: str,
    masks_provider: MaskProvider | None,
) -> torch.Tensor | None:
    needed = test_masking == "masked" or strategy.kind == "late"
    if not needed:
        return None
    if masks_provider is None:
        if strategy.mask_source == "oracle":
            masks_provider = oracle_masks
        else:
            raise ValueError(
                "masks required (masked test or late strategy) but no masks_provider given "
                "and mask_source is 'predicted'"
            )
    return masks_provider(records)


def predictions(
    model: ClassifierModel,
    records: Sequence[SampleRecord],
    strategy: StrategyConfig,
    test_masking: str = "original",
    masks_provider: MaskProvider | None = None,
    batch_size: int = 64,
) -> np.ndarray:
    """Predicted class indices; argmax ties broken by the lowest class index.

    test_masking='masked' feeds early-masked images regardless of how the model
    was trained. A late strategy keeps its structural feature masking either
    way; baseline and early models are architecturally plain forwards.
    """
    if test_masking not in TEST_MASKINGS:
        raise ValueError(f"test_masking must be one of {TEST_MASKINGS}, got {test_masking!r}")
    if not records:
        raise ValueError("predictions: empty record set")
    masks = _resolve_masks(records, strategy, test_masking, masks_provider)
    structural = strategy if strategy.kind == "late" else baseline()
    outs = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            batch = records[start : start + batch_size]
            images = stack_images(batch)
            batch_masks = masks[start : start + batch_size] if masks is not None else None
            if test_masking == "masked":
                images = apply_early_mask(images, batch_masks)
            logits = model(images) if structural.kind == "baseline" else masked_forward(
                model, images, batch_masks, structural
            )
            outs.append(logits.numpy().argmax(axis=-1))
    return np.concatenate(outs)


def accuracy(
    model: ClassifierModel,
    records: Sequence[SampleRecord],
    strategy: StrategyConfig,
    test_masking: str = "original",
    masks_provider: MaskProvider | None = None,
    batch_size: int = 64,
) -> float:
    """Percent of correct argmax predictions."""
    pred = predictions(model, records, strategy, test_masking, masks_provider, batch_size)
    labels = labels_tensor(records).numpy()
    return 100.0 * float((pred == labels).mean())


def cross_eval(
    model: ClassifierModel,
    datasets: dict[str, Sequence[SampleRecord]],
    strategy: StrategyConfig,
    masks_provider: MaskProvider | None = None,
    metadata: dict | None = None,
    batch_size: int = 64,
) -> EvalReport:
    """Fill the {id_test, ood_test} x {original, masked} accuracy matrix.

    Masks for the masked columns are produced from each test set's own images
    by the provider (predicted masks by default in the pipelines).
    """
    for key in DATASET_KEYS:
        if key not in datasets or not datasets[key]:
            raise ValueError(f"cross_eval: dataset '{key}' missing or empty")
    report = EvalReport(metadata=dict(metadata or {}))
    for dataset in DATASET_KEYS:
        for masking in TEST_MASKINGS:
            report.cells[(dataset, masking)] = accuracy(
                model, datasets[dataset], strategy, masking, masks_provider, batch_size
            )
    report.validate()
    return report


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    key: str
    id_pct: float
    ood_pct: float
    per_seed: list[tuple[int, float, float]] = field(default_factory=list)


@dataclass
class SweepTable:
    rows: list[SweepRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        keys = [row.key for row in self.rows]
        if len(keys) != len(set(keys)):
            raise ValueError(f"duplicate sweep keys: {keys}")

    def row(self, key: str) -> SweepRow:
        for row in self.rows:
            if row.key == key:
                return row
        raise KeyError(key)


def deployment_test_masking(strategy: StrategyConfig) -> str:
    """How a trained model is fed at test time: early-masked input only when the
    strategy masks at the image level (early, or late at stage 0)."""
    if strategy.kind == "early" or (strategy.kind == "late" and strategy.stage == "stage0"):
        return "masked"
    return "original"


def train_and_eval(
    datasets: dict[str, Sequence[SampleRecord]],
    pretrained_backbone: Backbone,
    strategy: StrategyConfig,
    head_variant: str,
    train_cfg: TrainConfig,
    num_classes: int,
    masks_provider: MaskProvider | None = None,
) -> tuple[ClassifierModel, TrainHistory, dict[str, float]]:
    """One experiment run: clone the pretrained backbone, train a classifier
    under the strategy, and measure ID/OOD accuracy with the strategy's
    deployment-time masking.
    """
    backbone = copy.deepcopy(pretrained_backbone)
    backbone.requires_grad_(True)
    model = build_classifier(backbone, head_variant, num_classes, seed=train_cfg.seed)
    model, history = train_classifier(
        model, datasets["train"], train_cfg, strategy, masks_provider, datasets.get("val")
    )
    masking = deployment_test_masking(strategy)
    scores = {
        key: accuracy(model, datasets[key], strategy, masking, masks_provider)
        for key in DATASET_KEYS
    }
    return model, history, scores


def _median_rows(
    key: str, runs: list[tuple[int, float, float]]
) -> SweepRow:
    id_med = float(statistics.median([r[1] for r in runs]))
    ood_med = float(statistics.median([r[2] for r in runs]))
    return SweepRow(key=key, id_pct=id_med, ood_pct=ood_med, per_seed=runs)


def stage_sweep(
    stages: Sequence[str],
    datasets: dict[str, Sequence[SampleRecord]],
    pretrained_backbone: Backbone,
    head_variant: str,
    train_cfg: TrainConfig,
    num_classes: int,
    seeds: Sequence[int] = (0,),
    mask_source: str = "predicted",
    masks_provider: MaskProvider | None = None,
) -> SweepTable:
    """Train one late-masked model per stage (stage0 is early masking) under an
    otherwise identical config and tabulate median-of-seeds ID/OOD accuracy.
    """
    names = pretrained_backbone.stage_names
    for stage in stages:
        if stage not in names:
            raise ValueError(f"unknown stage {stage!r}, expected one of {names}")
    table = SweepTable(
        metadata={
            "kind": "stage_sweep",
            "backbone": pretrained_backbone.kind,
            "seeds": list(seeds),
        }
    )
    for stage in stages:
        strategy = late(stage, mask_source=mask_source)
        runs = []
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            _, _, scores = train_and_eval(
                datasets, pretrained_backbone, strategy, head_variant, cfg, num_classes, masks_provider
            )
            runs.append((seed, scores["id_test"], scores["ood_test"]))
        table.rows.append(_median_rows(stage, runs))
    table.validate()
    return table


def head_sweep(
    variants: Sequence[str],
    strategies: Sequence[StrategyConfig],
    regimes: Sequence[str],
    datasets: dict[str, Sequence[SampleRecord]],
    pretrained_backbone: Backbone,
    train_cfgs: dict[str, TrainConfig],
    num_classes: int,
    seeds: Sequence[int] = (0,),
    masks_provider: MaskProvider | None = None,
) -> SweepTable:
    """Full factorial over head variants x strategies x regimes on a ViT.

    Row keys are 'strategy|variant|regime' (late strategies include the stage).
    """
    if pretrained_backbone.kind != "vit":
        raise ValueError(f"head_sweep requires a vit backbone, got {pretrained_backbone.kind!r}")
    for regime in regimes:
        if regime not in train_cfgs:
            raise ValueError(f"missing train config for regime {regime!r}")
    table = SweepTable(metadata={"kind": "head_sweep", "seeds": list(seeds)})
    for strategy in strategies:
        label = strategy.kind if strategy.kind != "late" else f"late:{strategy.stage}"
        for variant in variants:
            for regime in regimes:
                runs = []
                for seed in seeds:
                    cfg = replace(train_cfgs[regime], seed=seed)
                    _, _, scores = train_and_eval(
                        datasets, pretrained_backbone, strategy, variant, cfg, num_classes, masks_provider
                    )
                    runs.append((seed, scores["id_test"], scores["ood_test"]))
                table.rows.append(_median_rows(f"{label}|{variant}|{regime}", runs))
    table.validate()
    return table


def flag_order_violations(
    values: Sequence[float], slack: float = 1.0, keys: Sequence[str] | None = None
) -> list[str]:
    """Flag adjacent pairs where a value increases by more than slack.

    Used on a stage sweep's OOD column ordered from stage 0 toward the last
    stage, where masking later should not help.
    """
    keys = list(keys) if keys is not None else [str(i) for i in range(len(values))]
    flags = []
    for i in range(len(values) - 1):
        if values[i + 1] > values[i] + slack:
            flags.append(
                f"{keys[i + 1]} ({values[i + 1]:.2f}) exceeds {keys[i]} ({values[i]:.2f}) by more than {slack}"
            )
    return flags
