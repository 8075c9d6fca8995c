"""Losses, optimizer, synthetic data, training loop and metrics."""
from .data import (Split, SyntheticData, SyntheticDatasetSpec, dataset_from_bytes,
                   dataset_to_bytes, generate_synthetic_dataset, load_dataset, save_dataset)
from .loop import (TrainResult, dataset_loss, evaluate, evaluate_zsl, predict, train_model)
from .losses import AslConfig, LossConfig, asl_loss, bce_loss, softmax_ce_loss
from .metrics import SUMMARY_HEADER, MetricsReport, average_precision, eval_f1_at_k, eval_map
from .optim import Adam, AdamState, adam_step

__all__ = [
    "SUMMARY_HEADER", "Adam", "AdamState", "AslConfig", "LossConfig", "MetricsReport", "Split", "SyntheticData",
    "SyntheticDatasetSpec", "TrainResult", "adam_step", "asl_loss", "average_precision",
    "bce_loss", "dataset_from_bytes", "dataset_loss", "dataset_to_bytes", "eval_f1_at_k",
    "eval_map", "evaluate", "evaluate_zsl", "generate_synthetic_dataset", "load_dataset",
    "predict", "save_dataset", "softmax_ce_loss", "train_model",
]
