"""Mini-batch training and evaluation of classification heads."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, TrainingDivergedError
from ..tensor import Tape, Tensor
from ..zsl import AugmentationConfig, ZslMLDecoder, inference_labels
from .losses import LossConfig
from .metrics import MetricsReport, eval_map
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: object
    loss_trace: list = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan


def _training_logits(model, tokens, targets, batch_index, aug):
    if hasattr(model, "training_logits"):
        return model.training_logits(tokens, targets, batch_index, aug)
    if aug is not None and aug.enabled:
        raise ConfigError(f"query augmentations are not supported by the {model.kind} head")
    return model(tokens), targets


def dataset_loss(model, split, loss_cfg: LossConfig, batch_size=64):
    """Mean loss over a split without augmentation or gradient recording."""
    total, count = 0.0, 0
    for start in range(0, len(split), batch_size):
        sl = slice(start, start + batch_size)
        logits = model(Tensor(split.tokens[sl]))
        n = split.tokens[sl].shape[0]
        total += loss_cfg(logits, split.targets[sl]).item() * n
        count += n
    return total / count


def train_model(model, split, loss_cfg: LossConfig | None = None,
                aug: AugmentationConfig | None = None, epochs=30, seed=0, lr=2e-4,
                batch_size=16) -> TrainResult:
    """Adam over shuffled mini-batches; deterministic for a given seed.

    ``lr == 0`` evaluates the loss on each batch without updating anything.
    """
    loss_cfg = loss_cfg or LossConfig()
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    params = model.parameters()
    opt = Adam(params, lr) if lr > 0 else None
    rng = np.random.default_rng(seed)
    result = TrainResult(model, initial_loss=dataset_loss(model, split, loss_cfg))
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(split))
        losses, sizes = [], []
        for b, start in enumerate(range(0, len(split), batch_size)):
            idx = order[start:start + batch_size]
            tokens = Tensor(split.tokens[idx])
            with Tape() as tape:
                logits, targets = _training_logits(model, tokens, split.targets[idx], step, aug)
                loss = loss_cfg(logits, targets)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(seed, epoch, b, value)
                if opt is not None:
                    tape.backward(loss)
            if opt is not None:
                opt.step()
                opt.zero_grad()
            losses.append(value)
            sizes.append(len(idx))
            step += 1
        result.loss_trace.append(float(np.average(losses, weights=sizes)))
        log.debug("epoch %d loss %.6f", epoch, result.loss_trace[-1])
    result.final_loss = dataset_loss(model, split, loss_cfg)
    return result


def eval_threads():
    try:
        return max(1, int(os.environ.get("MLDEC_THREADS", "1")))
    except ValueError:
        return 1


def predict(model, tokens, labels=None, batch_size=64, threads=None):
    """Sigmoid-free logits for every image, computed chunk-wise in input order."""
    threads = eval_threads() if threads is None else threads
    chunks = [tokens[s:s + batch_size] for s in range(0, tokens.shape[0], batch_size)]

    def run(chunk):
        t = Tensor(chunk)
        out = model(t) if labels is None else model.forward(t, labels)
        return out.data

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts, axis=0)


def evaluate(model, split, mode="plain") -> MetricsReport:
    scores = predict(model, split.tokens)
    return eval_map(scores, split.targets, mode=mode, labels=list(split.labels))


def evaluate_zsl(model: ZslMLDecoder, split, table=None) -> dict:
    """ZSL (unseen labels only) and GZSL (seen then unseen) reports."""
    table = model.table if table is None else table
    reports = {}
    for mode in ("ZSL", "GZSL"):
        labels = inference_labels(table, mode)
        saved, model.table = model.table, table
        try:
            scores = predict(model, split.tokens, labels=labels)
        finally:
            model.table = saved
        reports[mode] = eval_map(scores, split.columns(labels), mode=mode, labels=labels)
    return reports
