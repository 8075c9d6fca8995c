"""Scaled dot-product and multi-head attention."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Parameter, Tensor, concat, matmul, mul_scalar, softmax, transpose


def uniform_init(rng, shape, fan_in, name):
    a = math.sqrt(1.0 / fan_in)
    return Parameter(rng.uniform(-a, a, size=shape), name)


@dataclass
class MultiHeadAttnParams:
    """Per-head query/key/value projections (D x D/h each) and the output map."""

    model_dim: int
    num_heads: int
    w_q: list
    w_k: list
    w_v: list
    w_o: Parameter

    def __post_init__(self):
        D, h = self.model_dim, self.num_heads
        if h < 1 or D % h:
            raise ConfigError(f"num_heads={h} must divide model_dim={D}")
        dk = D // h
        for group in (self.w_q, self.w_k, self.w_v):
            if len(group) != h or any(w.shape != (D, dk) for w in group):
                raise ConfigError(f"head projections must be {h} matrices of shape ({D}, {dk})")
        if self.w_o.shape != (D, D):
            raise ConfigError(f"output projection must be ({D}, {D}), got {self.w_o.shape}")

    @property
    def head_dim(self):
        return self.model_dim // self.num_heads

    @classmethod
    def init(cls, model_dim, num_heads, rng, prefix="attn"):
        if num_heads < 1 or model_dim % num_heads:
            raise ConfigError(f"num_heads={num_heads} must divide model_dim={model_dim}")
        dk = model_dim // num_heads

        def make(kind):
            return [uniform_init(rng, (model_dim, dk), model_dim, f"{prefix}.{kind}{i}")
                    for i in range(num_heads)]

        return cls(model_dim, num_heads, make("w_q"), make("w_k"), make("w_v"),
                   uniform_init(rng, (model_dim, model_dim), model_dim, f"{prefix}.w_o"))

    @classmethod
    def identity(cls, model_dim, prefix="attn"):
        """Single head with every projection set to the identity."""
        eye = np.eye(model_dim)
        return cls(model_dim, 1, [Parameter(eye, f"{prefix}.w_q0")],
                   [Parameter(eye, f"{prefix}.w_k0")], [Parameter(eye, f"{prefix}.w_v0")],
                   Parameter(eye, f"{prefix}.w_o"))

    def parameters(self):
        return [*self.w_q, *self.w_k, *self.w_v, self.w_o]


def _check_qkv(q, k, v):
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise DimensionError(f"attention inputs need >= 2 axes: {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[-1] < 1:
        raise DimensionError(
            f"attention shapes inconsistent: Q {q.shape}, K {k.shape}, V {v.shape}")


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Softmax(Q K^T / sqrt(d_k)) over the key axis."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    return softmax(mul_scalar(matmul(q, transpose(k)), scale), axis=-1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    _check_qkv(q, k, v)
    return matmul(attention_weights(q, k), v)


def multi_head_attention(params: MultiHeadAttnParams, q_in: Tensor, k_in: Tensor,
                         v_in: Tensor) -> Tensor:
    D = params.model_dim
    for name, t in (("Q", q_in), ("K", k_in), ("V", v_in)):
        if t.shape[-1] != D:
            raise DimensionError(f"{name} input has last dim {t.shape[-1]}, expected {D}")
    heads = [
        scaled_dot_attention(matmul(q_in, wq), matmul(k_in, wk), matmul(v_in, wv))
        for wq, wk, wv in zip(params.w_q, params.w_k, params.w_v)
    ]
    cat = heads[0] if len(heads) == 1 else concat(heads, axis=-1)
    return matmul(cat, params.w_o)
