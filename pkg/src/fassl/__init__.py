"""Frequency-aware prototype learning and re-balanced teacher-student
self-supervised training on long-tailed vector data."""

from .data import (AugmentConfig, Dataset, DatasetSpec, augment_view, load_dataset,
                   make_longtail_counts, partition_groups, save_dataset, synth_gaussian_mixture)
from .encoder import EncoderConfig, ParamSet, ema_update, encode, init_params, project
from .evaluation import (GroupMetrics, ProtoDistribution, few_shot_subset, group_metrics,
                         linear_probe, prototype_class_distribution)
from .kernels import BACKEND
from .pipeline import RunConfig, run_pipeline, sweep
from .prototypes import (PrototypeBank, ProtoStageConfig, contrastive_loss, init_prototypes,
                         similarity_scores, train_prototype_stage)
from .rebalance import (RebalanceConfig, clip_normalize_weights, consistency_loss, rarity_weight,
                        rebalanced_loss, train_rebalance_stage)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "Dataset",
    "DatasetSpec",
    "augment_view",
    "load_dataset",
    "make_longtail_counts",
    "partition_groups",
    "save_dataset",
    "synth_gaussian_mixture",
    "EncoderConfig",
    "ParamSet",
    "ema_update",
    "encode",
    "init_params",
    "project",
    "GroupMetrics",
    "ProtoDistribution",
    "few_shot_subset",
    "group_metrics",
    "linear_probe",
    "prototype_class_distribution",
    "BACKEND",
    "RunConfig",
    "run_pipeline",
    "sweep",
    "PrototypeBank",
    "ProtoStageConfig",
    "contrastive_loss",
    "init_prototypes",
    "similarity_scores",
    "train_prototype_stage",
    "RebalanceConfig",
    "clip_normalize_weights",
    "consistency_loss",
    "rarity_weight",
    "rebalanced_loss",
    "train_rebalance_stage",
]
