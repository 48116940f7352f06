"""Desk-scale lab for studying background-masking strategies (baseline, early
image-level masking, late feature-level masking) in fine-grained image
classification under background-induced distribution shift.
"""

__version__ = "0.1.0"

from .backbones import BackboneConfig, build_backbone
from .heads import ClassifierModel, build_classifier, build_head, classify, gap_pool
from .maskops import (
    StrategyConfig,
    apply_early_mask,
    apply_feature_mask,
    apply_token_mask,
    masked_forward,
    subsample_mask,
)
from .segmodel import SegTrainConfig, dice, evaluate_segmenter, predict_mask, train_segmenter
from .synthset import DatasetSpec, SampleRecord, composite, generate_dataset, load_directory, measure_bias
from .trainkit import TrainConfig, lr_at, smoothed_loss, train_classifier
from .evalkit import EvalReport, SweepTable, accuracy, cross_eval, head_sweep, stage_sweep

__all__ = [
    "BackboneConfig",
    "ClassifierModel",
    "DatasetSpec",
    "EvalReport",
    "SampleRecord",
    "SegTrainConfig",
    "StrategyConfig",
    "SweepTable",
    "TrainConfig",
    "accuracy",
    "apply_early_mask",
    "apply_feature_mask",
    "apply_token_mask",
    "build_backbone",
    "build_classifier",
    "build_head",
    "classify",
    "composite",
    "cross_eval",
    "dice",
    "evaluate_segmenter",
    "gap_pool",
    "generate_dataset",
    "head_sweep",
    "load_directory",
    "lr_at",
    "masked_forward",
    "measure_bias",
    "predict_mask",
    "smoothed_loss",
    "stage_sweep",
    "subsample_mask",
    "train_classifier",
    "train_segmenter",
]
