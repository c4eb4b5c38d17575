"""Exemplar-free class-incremental learning with a dual key-value memory.

A small numpy autodiff engine drives a dense encoder with a shared and a
task-specific memory. After each task the most-changed memory slots are
frozen and fresh ones appended.
"""
from .adjustment import AdjustmentPolicy, capacity_projection, freeze_count, importance_scores, prune_and_expand
from .errors import ContractViolation, DegenerateInputError, IntegrityError, ParseError
from .experiment_io import ExperimentConfig, load_checkpoint, load_config, save_checkpoint
from .losses import LossWeights, alignment_loss, classification_with_distillation, orthogonality_loss, total_loss
from .memory import MemoryBank, assemble_readout, extract_queries, mask_frozen_gradients, memory_read
from .metrics import (avg_acc, export_features, forgetting, gaussian_kl, gaussian_w2, mean_feature_distance,
                      mean_pairwise_cosine)
from .model import Model, ModelConfig, bn_adapt, deep_copy
from .streams import Dataset, TaskSpec, TaskStream, load_dataset, make_synthetic_stream, split_class_incremental
from .trainer import ExperimentReport, TrainConfig, evaluate, run_stream, train_task

__all__ = [
    "AdjustmentPolicy", "ContractViolation", "Dataset", "DegenerateInputError", "EDDClassifier",
    "ExperimentConfig", "ExperimentReport", "IntegrityError", "LossWeights", "MemoryBank", "Model", "ModelConfig",
    "ParseError", "TaskSpec", "TaskStream", "TrainConfig", "alignment_loss", "assemble_readout", "avg_acc",
    "bn_adapt", "capacity_projection", "classification_with_distillation", "deep_copy", "evaluate",
    "export_features", "extract_queries", "forgetting", "freeze_count", "gaussian_kl", "gaussian_w2",
    "importance_scores", "load_checkpoint", "load_config", "load_dataset", "make_synthetic_stream",
    "mask_frozen_gradients", "mean_feature_distance", "mean_pairwise_cosine", "memory_read", "orthogonality_loss",
    "prune_and_expand", "run_stream", "save_checkpoint", "split_class_incremental", "total_loss", "train_task",
]


def __getattr__(name):
    # scikit-learn is only imported when the estimator is first used, which keeps the CLI quick to start
    if name == "EDDClassifier":
        from .estimator import EDDClassifier
        return EDDClassifier
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
