"""Pinned desk-scale experiments behind the trend checks and the demos.

Each function trains one model from scratch and returns plain numbers, so a
caller can average over seeds. The settings were fixed from pilot runs; see
the README for what each experiment is meant to show.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .heads import HeadConfig, MLDecoderHead, QuerySet
from .tensor import Tensor
from .train import (LossConfig, Split, SyntheticDatasetSpec, evaluate, evaluate_zsl,
                    generate_synthetic_dataset, train_model)
from .zsl import AugmentationConfig, ZslConfig, ZslMLDecoder, shuffled_unseen_table

MULTILABEL_SPEC = dict(num_classes=20, embed_dim=16, word_dim=16, height=4, width=4,
                       num_train=1200, num_eval=300)
MULTILABEL_TRAIN = dict(epochs=15, lr=1e-3, batch_size=16)
MULTILABEL_MODEL = dict(model_dim=16, num_heads=2)

ZSL_SPEC = dict(num_classes=50, num_unseen=10, embed_dim=16, word_dim=16, height=4, width=4,
                num_train=1200, num_eval=400)
ZSL_TRAIN = dict(epochs=30, lr=1e-3, batch_size=16)
ZSL_MODEL = dict(model_dim=16, word_dim=16, num_heads=2)
# One random query per batch: with 40 seen labels the K // 10 default (four)
# cost up to 0.05 seen mAP on single seeds in pilots.
ZSL_RANDOM_QUERIES = 1


@dataclass
class MultilabelResult:
    seen_map: float
    initial_loss: float
    final_loss: float


def multilabel_run(query_kind="fixed_random", num_queries=None, seed=0) -> MultilabelResult:
    """ML-Decoder on the 20-class synthetic task; ``query_kind`` may be ``word_embedding``."""
    data = generate_synthetic_dataset(SyntheticDatasetSpec(seed=seed, **MULTILABEL_SPEC))
    n = MULTILABEL_SPEC["num_classes"]
    cfg = HeadConfig(num_classes=n, num_queries=num_queries, group_seed=seed, **MULTILABEL_MODEL)
    if query_kind == "word_embedding":
        if cfg.num_queries != n:
            raise ConfigError("word-embedding queries need one query per class")
        queries = QuerySet(Tensor(data.table.rows(data.train.labels)), "word_embedding")
        model = MLDecoderHead(cfg, seed=seed, queries=queries)
    else:
        model = MLDecoderHead(cfg, query_kind=query_kind, seed=seed)
    res = train_model(model, data.train, LossConfig("asl"), seed=seed, **MULTILABEL_TRAIN)
    return MultilabelResult(evaluate(model, data.eval).mAP, res.initial_loss, res.final_loss)


@dataclass
class ZslResult:
    zsl_map: float
    gzsl_map: float
    seen_map: float
    shuffled_zsl_map: float
    initial_loss: float
    final_loss: float


def zsl_run(augmentation="none", seed=0, loss="asl") -> ZslResult:
    """Full-decoding ZSL head trained on 40 seen labels, scored on 10 unseen ones."""
    data = generate_synthetic_dataset(SyntheticDatasetSpec(seed=seed, **ZSL_SPEC))
    model = ZslMLDecoder(ZslConfig(**ZSL_MODEL), data.table, seed=seed)
    aug = AugmentationConfig.preset(augmentation, seed=seed, random_query_count=ZSL_RANDOM_QUERIES)
    res = train_model(model, data.train, LossConfig(loss), aug, seed=seed, **ZSL_TRAIN)
    reports = evaluate_zsl(model, data.eval)
    shuffled = evaluate_zsl(model, data.eval, shuffled_unseen_table(data.table, seed))
    seen = data.table.seen_labels
    seen_split = Split(data.eval.tokens, data.eval.columns(seen), seen)
    return ZslResult(reports["ZSL"].mAP, reports["GZSL"].mAP, evaluate(model, seen_split).mAP,
                     shuffled["ZSL"].mAP, res.initial_loss, res.final_loss)
