"""Config-driven experiment runner: dataset generation, segmenter and
classifier training, cross-evaluation, stage/head sweeps, and report
rendering (markdown + CSV + PNG) in the layout of the tables this lab
reproduces.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

from .backbones import BackboneConfig, Backbone, build_backbone, load_backbone, save_backbone
from .evalkit import (
    EvalReport,
    SweepTable,
    cross_eval,
    head_sweep,
    stage_sweep,
)
from .heads import (
    CNN_HEAD_VARIANTS,
    HEAD_VARIANTS,
    VIT_HEAD_VARIANTS,
    build_classifier,
    load_classifier,
    save_classifier,
)
from .maskops import (
    MASK_SOURCES,
    STRATEGY_KINDS,
    StrategyConfig,
    early,
    late,
    oracle_masks,
    predicted_mask_provider,
)
from .segmodel import (
    SegTrainConfig,
    evaluate_segmenter,
    load_segmenter,
    save_segmenter,
    train_segmenter,
)
from .synthset import (
    DatasetSpec,
    SampleRecord,
    by_split,
    export_dataset,
    generate_dataset,
    load_directory,
)
from .trainkit import REGIMES, TrainConfig, pretrain_backbone, train_classifier
from .utils import ConfigError, split_seed

COMMANDS = ("gen-data", "train-seg", "eval-seg", "train-cls", "eval", "sweep-stages", "sweep-heads", "report")

STRATEGY_LABELS = {"baseline": "Baseline", "early": "Early-Masked", "late": "Late-Masked"}
VARIANT_LABELS = {"cls": "CLS", "patch_gap": "Patch", "concat": "CLS+Patch", "gap": "GAP"}

PAPER_FIXTURES = ("early_vs_baseline_paper", "stage_sweep_paper", "head_sweep_paper", "segmentation_paper")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DirectorySpec:
    path: str


@dataclass
class ExperimentConfig:
    seed: int
    seeds: tuple[int, ...]
    output_dir: str | None
    dataset: DatasetSpec | DirectorySpec
    backbone: BackboneConfig
    strategy: StrategyConfig
    head: str
    train: TrainConfig
    pretrain: TrainConfig
    segmenter: SegTrainConfig
    mask_threshold: float
    eval_options: dict

    def to_dict(self) -> dict:
        dataset: dict
        if isinstance(self.dataset, DirectorySpec):
            dataset = {"kind": "directory", "path": self.dataset.path}
        else:
            dataset = {"kind": "synthetic", **asdict(self.dataset)}
            dataset["image_size"] = list(self.dataset.image_size)
            dataset["fg_area_band"] = list(self.dataset.fg_area_band)
            dataset["split_sizes"] = dict(self.dataset.split_sizes)
        backbone = asdict(self.backbone)
        backbone["image_size"] = list(self.backbone.image_size)
        return {
            "seed": self.seed,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "dataset": dataset,
            "backbone": backbone,
            "strategy": {
                "strategy": self.strategy.kind,
                "stage": self.strategy.stage,
                "mask_source": self.strategy.mask_source,
            },
            "head": self.head,
            "train": asdict(self.train),
            "pretrain": asdict(self.pretrain),
            "segmenter": {**asdict(self.segmenter), "threshold": self.mask_threshold},
            "eval": self.eval_options,
        }


def _build_section(section: str, raw: dict, cls, defaults: dict) -> object:
    allowed = set(cls.__dataclass_fields__)
    merged = dict(defaults)
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"{section}.{key}: unknown field")
        merged[key] = value
    try:
        obj = cls(**merged)
        obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    return obj


def parse_config(raw: dict) -> ExperimentConfig:
    """Parse and validate a raw config dict, resolving per-component seeds from
    the root seed where not given explicitly."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    known = {"seed", "seeds", "output_dir", "dataset", "backbone", "strategy", "head", "train", "pretrain", "segmenter", "eval"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown section")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed: expected an integer")

    # dataset
    dataset_raw = dict(raw.get("dataset", {}))
    kind = dataset_raw.pop("kind", "synthetic")
    dataset: DatasetSpec | DirectorySpec
    if kind == "directory":
        path = dataset_raw.pop("path", None)
        if not path:
            raise ConfigError("dataset.path: required for a directory dataset")
        if dataset_raw:
            raise ConfigError(f"dataset.{next(iter(dataset_raw))}: unknown field")
        dataset = DirectorySpec(path=str(path))
    elif kind == "synthetic":
        if "image_size" in dataset_raw:
            dataset_raw["image_size"] = tuple(dataset_raw["image_size"])
        if "fg_area_band" in dataset_raw:
            dataset_raw["fg_area_band"] = tuple(dataset_raw["fg_area_band"])
        defaults = {"seed": split_seed(seed, "dataset")}
        dataset = _build_section("dataset", dataset_raw, DatasetSpec, defaults)
    else:
        raise ConfigError(f"dataset.kind: expected 'synthetic' or 'directory', got {kind!r}")

    # backbone
    backbone_raw = dict(raw.get("backbone", {}))
    if "image_size" in backbone_raw:
        backbone_raw["image_size"] = tuple(backbone_raw["image_size"])
    backbone_defaults = {"seed": split_seed(seed, "backbone")}
    if isinstance(dataset, DatasetSpec):
        backbone_defaults["image_size"] = dataset.image_size
    backbone = _build_section("backbone", backbone_raw, BackboneConfig, backbone_defaults)

    # strategy
    strategy_raw = dict(raw.get("strategy", {}))
    strategy_kind = strategy_raw.pop("strategy", strategy_raw.pop("kind", "baseline"))
    stage = strategy_raw.pop("stage", None)
    mask_source = strategy_raw.pop("mask_source", "predicted")
    if strategy_raw:
        raise ConfigError(f"strategy.{next(iter(strategy_raw))}: unknown field")
    if strategy_kind not in STRATEGY_KINDS:
        raise ConfigError(f"strategy.strategy: expected one of {STRATEGY_KINDS}, got {strategy_kind!r}")
    if mask_source not in MASK_SOURCES:
        raise ConfigError(f"strategy.mask_source: expected one of {MASK_SOURCES}, got {mask_source!r}")
    strategy = StrategyConfig(kind=strategy_kind, stage=stage, mask_source=mask_source)
    try:
        strategy.validate()
    except ValueError as exc:
        raise ConfigError(f"strategy.stage: {exc}") from exc

    # head
    head = raw.get("head", "gap" if backbone.kind == "cnn" else "concat")
    if head not in HEAD_VARIANTS:
        raise ConfigError(f"head: expected one of {HEAD_VARIANTS}, got {head!r}")
    allowed_heads = CNN_HEAD_VARIANTS if backbone.kind == "cnn" else VIT_HEAD_VARIANTS
    if head not in allowed_heads:
        raise ConfigError(f"head: {head!r} incompatible with backbone kind {backbone.kind!r}")

    # train / pretrain
    train = _build_section("train", dict(raw.get("train", {})), TrainConfig, {"seed": split_seed(seed, "train")})
    pretrain_defaults = {
        "regime": "finetune",
        "epochs": 8,
        "batch_size": 32,
        "classifier_lr": 1e-3,
        "backbone_lr": 1e-3,
        "warmup_epochs": 0,
        "hflip": True,
        "seed": split_seed(seed, "pretrain"),
    }
    pretrain = _build_section("pretrain", dict(raw.get("pretrain", {})), TrainConfig, pretrain_defaults)
    if pretrain.regime != "finetune":
        raise ConfigError("pretrain.regime: must be 'finetune'")

    # segmenter
    seg_raw = dict(raw.get("segmenter", {}))
    mask_threshold = seg_raw.pop("threshold", 0.5)
    if not 0.0 < mask_threshold < 1.0:
        raise ConfigError(f"segmenter.threshold: must be in (0, 1), got {mask_threshold}")
    segmenter = _build_section("segmenter", seg_raw, SegTrainConfig, {"seed": split_seed(seed, "segmenter")})

    # seeds
    seeds_raw = raw.get("seeds")
    if seeds_raw is None:
        seeds = (train.seed,)
    else:
        if not isinstance(seeds_raw, list) or not seeds_raw or not all(isinstance(s, int) for s in seeds_raw):
            raise ConfigError("seeds: expected a non-empty list of integers")
        seeds = tuple(seeds_raw)

    output_dir = raw.get("output_dir")

    eval_defaults = {
        "dataset_labels": ["CUB-analog", "OOD"],
        "stages": None,
        "head_variants": ["cls", "patch_gap", "concat"],
        "strategies": ["baseline", "early", "late"],
        "regimes": ["frozen", "finetune"],
        "frozen": {},
        "finetune": {},
    }
    eval_options = dict(eval_defaults)
    for key, value in dict(raw.get("eval", {})).items():
        if key not in eval_defaults:
            raise ConfigError(f"eval.{key}: unknown field")
        eval_options[key] = value
    labels = eval_options["dataset_labels"]
    if not isinstance(labels, list) or len(labels) != 2:
        raise ConfigError("eval.dataset_labels: expected a list of two labels")
    for regime in eval_options["regimes"]:
        if regime not in REGIMES:
            raise ConfigError(f"eval.regimes: expected entries from {REGIMES}, got {regime!r}")
    for kind_name in eval_options["strategies"]:
        if kind_name not in STRATEGY_KINDS:
            raise ConfigError(f"eval.strategies: expected entries from {STRATEGY_KINDS}, got {kind_name!r}")
    for variant in eval_options["head_variants"]:
        if variant not in HEAD_VARIANTS:
            raise ConfigError(f"eval.head_variants: expected entries from {HEAD_VARIANTS}, got {variant!r}")

    return ExperimentConfig(
        seed=seed,
        seeds=seeds,
        output_dir=output_dir,
        dataset=dataset,
        backbone=backbone,
        strategy=strategy,
        head=head,
        train=train,
        pretrain=pretrain,
        segmenter=segmenter,
        mask_threshold=mask_threshold,
        eval_options=eval_options,
    )


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not an object")
        node[parts[-1]] = parsed
    return parse_config(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _section_hash(cfg: ExperimentConfig, sections: Sequence[str]) -> str:
    payload = {name: cfg.to_dict()[name] for name in sections}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:10]


# ---------------------------------------------------------------------------
# results files: CSV with a one-line JSON metadata header


def write_results(path: str | Path, metadata: dict, rows: Sequence[dict]) -> None:
    columns = metadata["columns"]
    buf = io.StringIO()
    buf.write("# " + json.dumps(metadata, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([c["key"] for c in columns])
    for row in rows:
        writer.writerow([row.get(c["key"], "") for c in columns])
    Path(path).write_text(buf.getvalue())


def read_results(path: str | Path) -> tuple[dict, list[dict]]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing JSON metadata header line")
    try:
        metadata = json.loads(lines[0][2:])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: bad metadata header: {exc}") from exc
    if "columns" not in metadata or "title" not in metadata:
        raise ValueError(f"{path}: metadata must declare 'title' and 'columns'")
    reader = csv.reader(lines[1:])
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError(f"{path}: missing CSV header") from None
    expected = [c["key"] for c in metadata["columns"]]
    if header != expected:
        raise ValueError(f"{path}: CSV header {header} does not match metadata columns {expected}")
    rows = [dict(zip(header, row)) for row in reader if row]
    return metadata, rows


def render_markdown(metadata: dict, rows: Sequence[dict]) -> str:
    columns = metadata["columns"]
    out = [f"# {metadata['title']}", ""]
    out.append("| " + " | ".join(c["header"] for c in columns) + " |")
    out.append("|" + "|".join(" --- " for _ in columns) + "|")
    for row in rows:
        out.append("| " + " | ".join(str(row.get(c["key"], "")) for c in columns) + " |")
    return "\n".join(out) + "\n"


def save_bar_chart(metadata: dict, rows: Sequence[dict], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    columns = metadata["columns"]
    numeric_keys = []
    for col in columns:
        values = [row.get(col["key"], "") for row in rows]
        try:
            [float(v) for v in values if v != ""]
        except ValueError:
            continue
        if any(v != "" for v in values):
            numeric_keys.append(col)
    label_cols = [c for c in columns if c not in numeric_keys]
    labels = [" / ".join(str(row.get(c["key"], "")) for c in label_cols) or str(i) for i, row in enumerate(rows)]

    fig, ax = plt.subplots(figsize=(max(6, len(rows) * 0.9), 4.5))
    x = np.arange(len(rows))
    width = 0.8 / max(1, len(numeric_keys))
    for j, col in enumerate(numeric_keys):
        values = [float(row[col["key"]]) if row.get(col["key"], "") != "" else 0.0 for row in rows]
        ax.bar(x + j * width, values, width, label=col["header"])
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("accuracy (%)")
    ax.set_title(metadata["title"])
    if numeric_keys:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _pct(value: float) -> str:
    return f"{value:.2f}"


def _cross_eval_columns(labels: Sequence[str]) -> list[dict]:
    id_label, ood_label = labels
    return [
        {"key": "model", "header": "Model"},
        {"key": "training", "header": "Training"},
        {"key": "id_original", "header": f"{id_label}(%) / test on original"},
        {"key": "id_masked", "header": f"{id_label}(%) / test on masked"},
        {"key": "ood_original", "header": f"{ood_label}(%) / test on original"},
        {"key": "ood_masked", "header": f"{ood_label}(%) / test on masked"},
    ]


def _stage_sweep_columns(labels: Sequence[str]) -> list[dict]:
    return [
        {"key": "backbone", "header": "Backbone"},
        {"key": "stage", "header": "Feature Masking"},
        {"key": "id_pct", "header": f"{labels[0]}(%)"},
        {"key": "ood_pct", "header": f"{labels[1]}(%)"},
    ]


def _head_sweep_columns(labels: Sequence[str]) -> list[dict]:
    id_label, ood_label = labels
    return [
        {"key": "training", "header": "Training"},
        {"key": "representation", "header": "ViT representation"},
        {"key": "id_frozen", "header": f"{id_label}(%) / frozen"},
        {"key": "id_finetuned", "header": f"{id_label}(%) / fine-tuned"},
        {"key": "ood_frozen", "header": f"{ood_label}(%) / frozen"},
        {"key": "ood_finetuned", "header": f"{ood_label}(%) / fine-tuned"},
    ]


def paper_fixture_path(name: str) -> Path:
    if name not in PAPER_FIXTURES:
        raise ValueError(f"unknown fixture {name!r}, expected one of {PAPER_FIXTURES}")
    return Path(str(resources.files("maskbench") / "fixtures" / f"{name}.csv"))


def golden_path(name: str) -> Path:
    return Path(str(resources.files("maskbench") / "fixtures" / "golden" / f"{name}.md"))


def render_report(result_paths: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    """Render each results file to markdown, a normalized CSV and a PNG chart,
    plus a combined report.md. Byte-deterministic for fixed inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    sections: list[str] = []
    for path in result_paths:
        metadata, rows = read_results(path)
        stem = Path(path).stem
        md = render_markdown(metadata, rows)
        (out / f"{stem}.md").write_text(md)
        write_results(out / f"{stem}.csv", metadata, rows)
        save_bar_chart(metadata, rows, out / f"{stem}.png")
        written += [out / f"{stem}.md", out / f"{stem}.csv", out / f"{stem}.png"]
        sections.append(md)
    report = "# Report\n"
    if sections:
        report += "\n" + "\n".join(sections)
    (out / "report.md").write_text(report)
    written.append(out / "report.md")
    return written


# ---------------------------------------------------------------------------
# pipeline plumbing


class Workspace:
    """Resolves artifacts for a config inside an output directory, reusing
    anything already on disk whose content hash matches."""

    def __init__(self, cfg: ExperimentConfig, outdir: Path):
        self.cfg = cfg
        self.outdir = outdir
        self._records: list[SampleRecord] | None = None
        self._segmenter = None
        self._backbone: Backbone | None = None
        outdir.mkdir(parents=True, exist_ok=True)

    # dataset
    def dataset_dir(self) -> Path:
        if isinstance(self.cfg.dataset, DirectorySpec):
            return Path(self.cfg.dataset.path)
        return self.outdir / f"dataset-{_section_hash(self.cfg, ['dataset'])}"

    def ensure_dataset_dir(self) -> Path:
        root = self.dataset_dir()
        if isinstance(self.cfg.dataset, DirectorySpec):
            if not (root / "labels.csv").is_file():
                raise ConfigError(f"dataset.path: no labels.csv under {root}")
            return root
        if not (root / "labels.csv").is_file():
            print(f"generating dataset -> {root}")
            export_dataset(generate_dataset(self.cfg.dataset), root)
        return root

    def records(self) -> list[SampleRecord]:
        if self._records is None:
            self._records = load_directory(self.ensure_dataset_dir())
        return self._records

    def datasets(self) -> dict[str, list[SampleRecord]]:
        return by_split(self.records())

    def num_classes(self) -> int:
        if isinstance(self.cfg.dataset, DatasetSpec):
            return self.cfg.dataset.num_classes
        return max(r.label for r in self.records()) + 1

    # segmenter
    def segmenter_path(self) -> Path:
        return self.outdir / f"segmenter-{_section_hash(self.cfg, ['dataset', 'segmenter'])}.pt"

    def ensure_segmenter(self):
        if self._segmenter is None:
            path = self.segmenter_path()
            if path.is_file():
                self._segmenter, _ = load_segmenter(path)
            else:
                train = self.datasets().get("train")
                if not train:
                    raise ConfigError("dataset.split_sizes: a train split is required to fit the segmenter")
                print(f"training segmenter ({self.cfg.segmenter.epochs} epochs) -> {path}")
                self._segmenter, history = train_segmenter(train, self.cfg.segmenter)
                save_segmenter(self._segmenter, self.cfg.segmenter, path)
                with open(self.outdir / "seg_history.csv", "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["epoch", "loss"])
                    for i, loss in enumerate(history):
                        writer.writerow([i, f"{loss:.6f}"])
        return self._segmenter

    # pretrained backbone
    def backbone_path(self) -> Path:
        tag = _section_hash(self.cfg, ["dataset", "backbone", "pretrain"])
        return self.outdir / f"backbone-{self.cfg.backbone.kind}-{tag}.pt"

    def ensure_backbone(self) -> Backbone:
        if self._backbone is None:
            path = self.backbone_path()
            if path.is_file():
                self._backbone = load_backbone(path)
            else:
                splits = self.datasets()
                pretrain_split = splits.get("pretrain") or splits.get("train")
                if not pretrain_split:
                    raise ConfigError("dataset.split_sizes: a pretrain or train split is required")
                print(f"pretraining {self.cfg.backbone.kind} backbone ({self.cfg.pretrain.epochs} epochs) -> {path}")
                self._backbone, _ = pretrain_backbone(
                    pretrain_split, self.cfg.backbone, self.cfg.pretrain, self.num_classes()
                )
                save_backbone(self._backbone, path)
        return self._backbone

    def mask_provider(self, strategy: StrategyConfig):
        if strategy.mask_source == "oracle":
            return oracle_masks
        return predicted_mask_provider(self.ensure_segmenter(), threshold=self.cfg.mask_threshold)

    # trained classifier
    def model_path(self) -> Path:
        tag = _section_hash(self.cfg, ["dataset", "backbone", "pretrain", "segmenter", "strategy", "head", "train"])
        return self.outdir / f"model-{tag}.pt"

    def ensure_model(self):
        path = self.model_path()
        if path.is_file():
            return load_classifier(path)
        cfg = self.cfg
        strategy = cfg.strategy
        datasets = self.datasets()
        backbone = self.ensure_backbone()
        provider = self.mask_provider(strategy) if strategy.needs_mask else None
        import copy as _copy

        model_backbone = _copy.deepcopy(backbone)
        model_backbone.requires_grad_(True)
        model = build_classifier(model_backbone, cfg.head, self.num_classes(), seed=cfg.train.seed)
        strategy.validate(model_backbone.stage_names)
        print(f"training classifier ({cfg.train.regime}, {cfg.train.epochs} epochs) -> {path}")
        model, history = train_classifier(
            model, datasets["train"], cfg.train, strategy, provider, datasets.get("val")
        )
        save_classifier(model, path)
        history.to_csv(self.outdir / "history.csv")
        return model


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _dir_fingerprint(path: Path) -> str:
    marker = path / "labels.csv"
    return _sha256_file(marker) if marker.is_file() else ""


def write_manifest(outdir: Path, command: str, chash: str, artifacts: dict[str, Path]) -> Path:
    entries = {}
    for name, path in artifacts.items():
        if not path.exists():
            raise RuntimeError(f"artifact {name} missing on disk: {path}")
        entries[name] = {
            "path": str(path.relative_to(outdir) if path.is_relative_to(outdir) else path),
            "sha256": _dir_fingerprint(path) if path.is_dir() else _sha256_file(path),
        }
    manifest = {
        "command": command,
        "config_hash": chash,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "artifacts": entries,
    }
    path = outdir / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def should_skip(outdir: Path, command: str, chash: str, force: bool) -> bool:
    if force:
        return False
    manifest_path = outdir / f"manifest-{command}.json"
    if not manifest_path.is_file():
        return False
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError:
        return False
    if manifest.get("config_hash") != chash or manifest.get("command") != command:
        return False
    for entry in manifest.get("artifacts", {}).values():
        path = Path(entry["path"])
        if not path.is_absolute():
            path = outdir / path
        if not path.exists():
            return False
    return True


# ---------------------------------------------------------------------------
# commands


def _resolve_outdir(args, cfg: ExperimentConfig | None = None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get("MASKBENCH_OUT", "maskbench-out"))


def _strategy_label(strategy: StrategyConfig) -> str:
    if strategy.kind == "late":
        return f"Late-Masked[{strategy.stage}]"
    return STRATEGY_LABELS[strategy.kind]


def _model_label(backbone_cfg: BackboneConfig) -> str:
    if backbone_cfg.kind == "cnn":
        return f"ToyCNN-w{backbone_cfg.width}"
    return f"ToyViT-d{backbone_cfg.width}"


def cmd_gen_data(cfg: ExperimentConfig, outdir: Path, force: bool) -> int:
    if isinstance(cfg.dataset, DirectorySpec):
        raise ConfigError("dataset.kind: gen-data requires a synthetic dataset spec")
    chash = config_hash(cfg)
    if should_skip(outdir, "gen-data", chash, force):
        print("gen-data: up to date, skipping (use --force to regenerate)")
        return 0
    ws = Workspace(cfg, outdir)
    root = ws.ensure_dataset_dir()
    write_manifest(outdir, "gen-data", chash, {"dataset": root})
    print(f"dataset ready at {root}")
    return 0


def cmd_train_seg(cfg: ExperimentConfig, outdir: Path, force: bool) -> int:
    chash = config_hash(cfg)
    if should_skip(outdir, "train-seg", chash, force):
        print("train-seg: up to date, skipping")
        return 0
    ws = Workspace(cfg, outdir)
    if force and ws.segmenter_path().is_file():
        ws.segmenter_path().unlink()
    ws.ensure_segmenter()
    write_manifest(outdir, "train-seg", chash, {"segmenter": ws.segmenter_path()})
    return 0


def cmd_eval_seg(cfg: ExperimentConfig, outdir: Path, force: bool) -> int:
    chash = config_hash(cfg)
    if should_skip(outdir, "eval-seg", chash, force):
        print("eval-seg: up to date, skipping")
        return 0
    ws = Workspace(cfg, outdir)
    model = ws.ensure_segmenter()
    report = evaluate_segmenter(model, ws.records(), threshold=cfg.mask_threshold)
    metadata = {
        "kind": "dice_eval",
        "title": "Binary Segmentation Evaluation",
        "columns": [
            {"key": "split", "header": "Split"},
            {"key": "dice_fg", "header": "Dice FG(%)"},
            {"key": "dice_bg", "header": "Dice BG(%)"},
        ],
    }
    rows = [
        {"split": split, "dice_fg": _pct(scores.fg * 100), "dice_bg": _pct(scores.bg * 100)}
        for split, scores in sorted(report.splits.items())
    ]
    path = outdir / "seg_eval.csv"
    write_results(path, metadata, rows)
    render_report([path], outdir / "report")
    write_manifest(outdir, "eval-seg", chash, {"seg_eval": path})
    print(f"segmentation dice written to {path}")
    return 0


def cmd_train_cls(cfg: ExperimentConfig, outdir: Path, force: bool) -> int:
    chash = config_hash(cfg)
    if should_skip(outdir, "train-cls", chash, force):
        print("train-cls: up to date, skipping")
        return 0
    ws = Workspace(cfg, outdir)
    if force and ws.model_path().is_file():
        ws.model_path().unlink()
    ws.ensure_model()
    write_manifest(outdir, "train-cls", chash, {"model": ws.model_path()})
    return 0


def cmd_eval(cfg: ExperimentConfig, outdir: Path, force: bool) -> int:
    chash = config_hash(cfg)
    if should_skip(outdir, "eval", chash, force):
        print("eval: up to date, skipping")
        return 0
    ws = Workspace(cfg, outdir)
    model = ws.ensure_model()
    datasets = ws.datasets()
    provider = ws.mask_provider(cfg.strategy)
    report = cross_eval(
        model,
        {k: datasets[k] for k in ("id_test", "ood_test")},
        cfg.strategy,
        masks_provider=provider,
        metadata={"model": _model_label(cfg.backbone), "strategy": cfg.strategy.kind, "seed": cfg.train.seed},
    )
    labels = cfg.eval_options["dataset_labels"]
    metadata = {
        "kind": "cross_eval",
        "title": "Results: Early Masking vs Baseline",
        "dataset_labels": labels,
        "columns": _cross_eval_columns(labels),
    }
    row = {
        "model": _model_label(cfg.backbone),
        "training": _strategy_label(cfg.strategy),
        "id_original": _pct(report.cells[("id_test", "original")]),
        "id_masked": _pct(report.cells[("id_test", "masked")]),
        "ood_original": _pct(report.cells[("ood_test", "original")]),
        "ood_masked": _pct(report.cells[("ood_test", "masked")]),
    }
    path = outdir / "cross_eval.csv"
    write_results(path, metadata, [row])
    render_report([path], outdir / "report")
    write_manifest(outdir, "eval", chash, {"cross_eval": path})
    print(f"cross-eval written to {path}")
    return 0


def _sweep_rows_to_csv(table: SweepTable, outdir: Path, stem: str, key_fields: list[str]) -> Path:
    per_seed_path = outdir / f"{stem}_per_seed.csv"
    columns = [{"key": k, "header": k} for k in key_fields + ["seed", "id_pct", "ood_pct"]]
    metadata = {"kind": f"{table.metadata.get('kind', stem)}_per_seed", "title": f"{stem} per-seed", "columns": columns}
    rows = []
    for row in table.rows:
        parts = row.key.split("|")
        for seed, id_pct, ood_pct in row.per_seed:
            entry = dict(zip(key_fields, parts))
            entry.update({"seed": str(seed), "id_pct": _pct(id_pct), "ood_pct": _pct(ood_pct)})
            rows.append(entry)
    write_results(per_seed_path, metadata, rows)
    return per_seed_path


def cmd_sweep_stages(cfg: ExperimentConfig, outdir: Path, force: bool) -> int:
    chash = config_hash(cfg)
    if should_skip(outdir, "sweep-stages", chash, force):
        print("sweep-stages: up to date, skipping")
        return 0
    ws = Workspace(cfg, outdir)
    backbone = ws.ensure_backbone()
    stages = cfg.eval_options["stages"] or backbone.stage_names
    for stage in stages:
        if stage not in backbone.stage_names:
            raise ConfigError(f"eval.stages: unknown stage {stage!r}, expected one of {backbone.stage_names}")
    provider = ws.mask_provider(cfg.strategy)
    datasets = ws.datasets()
    print(f"stage sweep over {stages}, seeds {list(cfg.seeds)}")
    table = stage_sweep(
        stages,
        datasets,
        backbone,
        cfg.head,
        cfg.train,
        ws.num_classes(),
        seeds=cfg.seeds,
        mask_source=cfg.strategy.mask_source,
        masks_provider=provider,
    )
    labels = cfg.eval_options["dataset_labels"]
    metadata = {
        "kind": "stage_sweep",
        "title": "Feature Masking at Different Stages",
        "dataset_labels": labels,
        "columns": _stage_sweep_columns(labels),
    }
    model_label = _model_label(cfg.backbone)
    rows = [
        {"backbone": model_label, "stage": row.key, "id_pct": _pct(row.id_pct), "ood_pct": _pct(row.ood_pct)}
        for row in table.rows
    ]
    path = outdir / "stage_sweep.csv"
    write_results(path, metadata, rows)
    per_seed = _sweep_rows_to_csv(table, outdir, "stage_sweep", ["stage"])
    render_report([path], outdir / "report")
    write_manifest(outdir, "sweep-stages", chash, {"stage_sweep": path, "per_seed": per_seed})
    print(f"stage sweep written to {path}")
    return 0


def cmd_sweep_heads(cfg: ExperimentConfig, outdir: Path, force: bool) -> int:
    chash = config_hash(cfg)
    if should_skip(outdir, "sweep-heads", chash, force):
        print("sweep-heads: up to date, skipping")
        return 0
    if cfg.backbone.kind != "vit":
        raise ConfigError("backbone.kind: sweep-heads requires a vit backbone")
    ws = Workspace(cfg, outdir)
    backbone = ws.ensure_backbone()
    opts = cfg.eval_options
    strategies = []
    for kind in opts["strategies"]:
        if kind == "baseline":
            strategies.append(StrategyConfig(kind="baseline"))
        elif kind == "early":
            strategies.append(early(cfg.strategy.mask_source))
        else:
            strategies.append(late(backbone.last_stage, cfg.strategy.mask_source))
    try:
        train_cfgs = {
            "frozen": replace(
                cfg.train, regime="frozen", backbone_lr=None, pre_mask_lr=None, post_mask_lr=None,
                **opts["frozen"],
            ),
            "finetune": replace(cfg.train, regime="finetune", **opts["finetune"]),
        }
        for regime_cfg in train_cfgs.values():
            regime_cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"eval.frozen/finetune: {exc}") from exc
    provider = ws.mask_provider(cfg.strategy)
    print(f"head sweep: {opts['head_variants']} x {opts['strategies']} x {opts['regimes']}, seeds {list(cfg.seeds)}")
    table = head_sweep(
        opts["head_variants"],
        strategies,
        opts["regimes"],
        ws.datasets(),
        backbone,
        train_cfgs,
        ws.num_classes(),
        seeds=cfg.seeds,
        masks_provider=provider,
    )
    labels = opts["dataset_labels"]
    metadata = {
        "kind": "head_sweep",
        "title": "Varying the ViT Representation",
        "dataset_labels": labels,
        "columns": _head_sweep_columns(labels),
    }
    # pivot regimes into columns, paper-style
    rows = []
    for strategy in strategies:
        strat_key = strategy.kind if strategy.kind != "late" else f"late:{strategy.stage}"
        for variant in opts["head_variants"]:
            row = {
                "training": STRATEGY_LABELS[strategy.kind],
                "representation": VARIANT_LABELS[variant],
            }
            for regime in opts["regimes"]:
                entry = table.row(f"{strat_key}|{variant}|{regime}")
                suffix = "frozen" if regime == "frozen" else "finetuned"
                row[f"id_{suffix}"] = _pct(entry.id_pct)
                row[f"ood_{suffix}"] = _pct(entry.ood_pct)
            rows.append(row)
    path = outdir / "head_sweep.csv"
    write_results(path, metadata, rows)
    per_seed = _sweep_rows_to_csv(table, outdir, "head_sweep", ["strategy", "representation", "regime"])
    render_report([path], outdir / "report")
    write_manifest(outdir, "sweep-heads", chash, {"head_sweep": path, "per_seed": per_seed})
    print(f"head sweep written to {path}")
    return 0


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.results]
    if args.paper_fixtures:
        paths += [paper_fixture_path(name) for name in PAPER_FIXTURES]
    for path in paths:
        if not path.is_file():
            raise FileNotFoundError(f"results file not found: {path}")
    outdir = _resolve_outdir(args) / "report"
    written = render_report(paths, outdir)
    print(f"report rendered into {outdir} ({len(written)} files)")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskbench",
        description="Background-masking strategy lab: synthetic biased data, FG-BG "
        "segmentation, early/late masking classifiers, OOD evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="|".join(COMMANDS))

    def add_run_command(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field by dotted path")
        p.add_argument("--out", default=None, help="output directory (default: config output_dir, "
                       "then $MASKBENCH_OUT, then ./maskbench-out)")
        p.add_argument("--force", action="store_true", help="re-run even if artifacts are up to date")
        return p

    add_run_command("gen-data", "generate and export the synthetic dataset")
    add_run_command("train-seg", "train the FG-BG segmenter")
    add_run_command("eval-seg", "evaluate the segmenter (Dice per split)")
    add_run_command("train-cls", "train a classifier under the configured strategy")
    add_run_command("eval", "cross-evaluate a classifier on ID/OOD x original/masked")
    add_run_command("sweep-stages", "train one late-masked model per stage and tabulate")
    add_run_command("sweep-heads", "factorial sweep over ViT head variants, strategies and regimes")

    rp = sub.add_parser("report", help="render results files to markdown + CSV + PNG")
    rp.add_argument("results", nargs="*", help="results CSV files")
    rp.add_argument("--paper-fixtures", action="store_true",
                    help="include the bundled reference-table fixtures")
    rp.add_argument("--out", default=None)
    return parser


_RUN_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-seg": cmd_train_seg,
    "eval-seg": cmd_eval_seg,
    "train-cls": cmd_train_cls,
    "eval": cmd_eval,
    "sweep-stages": cmd_sweep_stages,
    "sweep-heads": cmd_sweep_heads,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args.config, args.overrides)
        outdir = _resolve_outdir(args, cfg)
        return _RUN_COMMANDS[args.command](cfg, outdir, args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
