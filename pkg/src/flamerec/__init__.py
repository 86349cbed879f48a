"""Frozen and learnable networks with an aligned modular ensemble for
sequential recommendation, on a small numpy autodiff engine."""

from .backbone import NetworkConfig, NetworkParams, forward, split_into_submodules
from .data import Batch, InteractionLog, SequenceDataset, build_sequences, make_batches, parse_interactions
from .ensemble import EnsembleState, enumerate_paths, forward_all, forward_path
from .evaluation import MetricReport, evaluate, popularity_report
from .training import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    pretrain_frozen,
    save_checkpoint,
    train,
    train_baseline,
    train_flame,
)

__version__ = "0.1.0"

__all__ = [
    "Batch", "Checkpoint", "EnsembleState", "InteractionLog", "MetricReport", "NetworkConfig",
    "NetworkParams", "SequenceDataset", "TrainConfig", "build_sequences", "enumerate_paths",
    "evaluate", "forward", "forward_all", "forward_path", "load_checkpoint", "make_batches",
    "parse_interactions", "popularity_report", "pretrain_frozen", "save_checkpoint",
    "split_into_submodules", "train", "train_baseline", "train_flame",
]
