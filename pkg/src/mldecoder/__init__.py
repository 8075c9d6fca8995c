"""Attention-based multi-label classification heads on a small numpy autodiff core.

Three heads share one interface (``head(tokens) -> logits``): global average
pooling, a transformer decoder with one query per class, and ML-Decoder, which
drops self-attention and decodes K fixed queries into N logits through a group
fully-connected layer. :mod:`mldecoder.zsl` adapts ML-Decoder to zero-shot
labels via word-vector queries.
"""
from .errors import (ConfigError, ContractError, DimensionError, EmptyMetricError,
                     LabelLookupError, TrainingDivergedError)
from .heads import (GapHead, GroupAssignment, HeadConfig, MLDecoderHead, TransformerDecoderHead,
                    make_group_assignment, strip_self_attention)
from .tensor import Parameter, Tape, Tensor, count_macs, finite_diff_check
from .zsl import AugmentationConfig, WordEmbeddingTable, ZslConfig, ZslMLDecoder

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig", "ConfigError", "ContractError", "DimensionError", "EmptyMetricError",
    "GapHead", "GroupAssignment", "HeadConfig", "LabelLookupError", "MLDecoderHead", "Parameter",
    "Tape", "Tensor", "TrainingDivergedError", "TransformerDecoderHead", "WordEmbeddingTable",
    "ZslConfig", "ZslMLDecoder", "count_macs", "finite_diff_check", "make_group_assignment",
    "strip_self_attention",
]
