"""Adaptive pooling for transformer set encoders, with a numpy autodiff backend."""

from .bounds import relation_stats, verify_bounds, weight_bounds
from .datagen import Dataset, VectorSet, generate_dataset, read_dataset, write_dataset
from .encoder import EncoderConfig, ModelState, forward, load_checkpoint, save_checkpoint
from .pooling import AdaPoolParams, ada_pool, avg_pool, max_pool, signal_loss, signal_optimal_pool
from .tasks import aggregation_targets, knn_targets, make_labels
from .train_eval import EvalReport, TrainConfig, cross_validate, train_fold

__version__ = "0.1.0"

__all__ = [
    "AdaPoolParams", "Dataset", "EncoderConfig", "EvalReport", "ModelState", "TrainConfig", "VectorSet",
    "ada_pool", "aggregation_targets", "avg_pool", "cross_validate", "forward", "generate_dataset",
    "knn_targets", "load_checkpoint", "make_labels", "max_pool", "read_dataset", "relation_stats",
    "save_checkpoint", "signal_loss", "signal_optimal_pool", "train_fold", "verify_bounds", "weight_bounds",
    "write_dataset",
]
