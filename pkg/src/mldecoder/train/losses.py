"""Multi-label losses as fused tape operations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ContractError, DimensionError
from ..tensor import Tensor, make_op


@dataclass(frozen=True)
class AslConfig:
    gamma_neg: float = 4.0
    gamma_pos: float = 0.0
    margin: float = 0.05

    def __post_init__(self):
        if self.gamma_neg < 0 or self.gamma_pos < 0:
            raise ConfigError("focusing parameters must be >= 0")
        if not 0 <= self.margin < 1:
            raise ConfigError("margin must be in [0, 1)")


def _check(logits, targets):
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {t.shape}")
    return t


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-_softplus(-x))


def asl_loss(logits: Tensor, targets, cfg: AslConfig = AslConfig()) -> Tensor:
    """Asymmetric loss averaged over all entries.

    Positive entries: ``-(1-p)^gamma_pos log p``. Negative entries:
    ``-p_m^gamma_neg log(1-p_m)`` with the shifted probability
    ``p_m = max(p - m, 0)``.
    """
    t = _check(logits, targets)
    if not np.all((t == 0) | (t == 1)):
        raise ContractError("ASL targets must be 0 or 1")
    x = logits.data
    gp, gn, m = cfg.gamma_pos, cfg.gamma_neg, cfg.margin
    p, q = _sigmoid(x), _sigmoid(-x)  # q = 1 - p without cancellation
    log_p = -_softplus(-x)
    pm = np.maximum(p - m, 0.0)
    one_minus_pm = np.where(p > m, q + m, 1.0)
    log_1m_pm = -_softplus(x) if m == 0 else np.log(one_minus_pm)
    loss_pos = -(q ** gp) * log_p
    loss_neg = -(pm ** gn) * log_1m_pm
    n = x.size
    value = np.sum(t * loss_pos + (1 - t) * loss_neg) / n

    def backward(g):
        grad_pos = gp * p * q ** gp * log_p - q ** (gp + 1)
        # d/dx of the negative term; zero on the clamp side (subgradient convention)
        active = p > m
        pq_over = np.where(active, p * q / np.where(active, one_minus_pm, 1.0), 0.0)
        if m == 0:
            pq_over = p
        focus = gn * np.where(active, pm, 1.0) ** (gn - 1) if gn > 0 else 0.0
        grad_neg = np.where(active, p * q * focus * (-log_1m_pm) + pm ** gn * pq_over, 0.0)
        return (g * (t * grad_pos + (1 - t) * grad_neg) / n,)

    return make_op(value, (logits,), backward)


def bce_loss(logits: Tensor, targets) -> Tensor:
    t = _check(logits, targets)
    x = logits.data
    n = x.size
    value = np.sum(_softplus(x) - t * x) / n
    return make_op(value, (logits,), lambda g: (g * (_sigmoid(x) - t) / n,))


def softmax_ce_loss(logits: Tensor, targets) -> Tensor:
    """Cross-entropy against a target distribution per row, averaged over rows."""
    t = _check(logits, targets)
    if np.any(t < 0) or not np.allclose(t.sum(axis=-1), 1.0, atol=1e-9):
        raise ContractError("cross-entropy targets must be distributions (rows summing to 1)")
    x = logits.data
    z = x - x.max(axis=-1, keepdims=True)
    log_sm = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = x.size // x.shape[-1]
    value = -np.sum(t * log_sm) / rows
    return make_op(value, (logits,), lambda g: (g * (np.exp(log_sm) - t) / rows,))


def multi_hot_to_distribution(targets):
    t = np.asarray(targets, dtype=np.float64)
    s = t.sum(axis=-1, keepdims=True)
    if np.any(s == 0):
        raise ContractError("cross-entropy needs at least one positive label per row")
    return t / s


@dataclass(frozen=True)
class LossConfig:
    kind: str = "asl"
    asl: AslConfig = AslConfig()

    def __post_init__(self):
        if self.kind not in ("asl", "bce", "ce"):
            raise ConfigError(f"unknown loss {self.kind!r}")

    def __call__(self, logits, targets):
        if self.kind == "asl":
            return asl_loss(logits, targets, self.asl)
        if self.kind == "bce":
            return bce_loss(logits, targets)
        return softmax_ce_loss(logits, multi_hot_to_distribution(targets))
