"""Finite-difference checks over every differentiable op and every head + loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .heads import GapHead, HeadConfig, MLDecoderHead, TransformerDecoderHead
from .tensor import GradCheckReport, Parameter, Tensor, finite_diff_check
from .train.losses import AslConfig, asl_loss, bce_loss, softmax_ce_loss
from .zsl import AugmentationConfig, WordEmbeddingTable, ZslConfig, ZslMLDecoder


@dataclass
class GradCheckResult:
    name: str
    seed: int
    report: GradCheckReport

    @property
    def passed(self):
        return self.report.passed

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} seed={self.seed} max_rel_error={self.report.max_rel_error:.3e}"


def _p(rng, shape, name, scale=1.0):
    return Parameter(scale * rng.normal(size=shape), name)


def _op_cases(rng):
    a = _p(rng, (2, 3, 4), "a")
    b = _p(rng, (4, 5), "b")
    c = _p(rng, (3, 4), "c")
    g = _p(rng, (4,), "gain")
    bias = _p(rng, (4,), "bias")
    G = _p(rng, (2, 3, 4), "G")
    W = _p(rng, (3, 2, 4), "W")
    W_shared = _p(rng, (2, 4), "W_shared")
    yield "matmul", [a, b], lambda: T.matmul(a, b)
    yield "transpose", [a], lambda: T.transpose(a)
    yield "add", [a, c], lambda: T.add(a, c)
    yield "mul", [a, c], lambda: T.mul(a, c)
    yield "mul_scalar", [a], lambda: T.mul_scalar(a, -1.7)
    yield "relu", [a], lambda: T.relu(a)
    yield "sum_all", [a], lambda: T.sum_all(a)
    yield "softmax", [a], lambda: T.softmax(a, axis=-1)
    yield "softmax_axis1", [a], lambda: T.softmax(a, axis=1)
    yield "layer_norm", [a, g, bias], lambda: T.layer_norm(a, g, bias)
    yield "concat", [a, c], lambda: T.concat([T.reshape(c, (1, 3, 4)), a], axis=0)
    yield "reshape", [a], lambda: T.reshape(a, (6, 4))
    yield "take", [c], lambda: T.take(c, np.array([2, 0, 2, 1]), axis=0)
    # five outputs from groups of two leave a one-row tail
    yield "group_matvec", [G, W], lambda: T.group_matvec(G, W, 5)
    yield "group_matvec_shared", [G, W_shared], lambda: T.group_matvec(G, W_shared, 5)


def _loss_cases(rng):
    logits = _p(rng, (4, 6), "logits", scale=2.0)
    targets = (rng.random((4, 6)) < 0.4).astype(float)
    # Negatives whose probability sits just above the ASL margin have gradients
    # of order (p - m)^4, below finite-difference roundoff; move them clear.
    p = 1 / (1 + np.exp(-logits.data))
    near = (targets == 0) & (p > 0.03) & (p < 0.15)
    logits.data[near] = rng.uniform(-1.0, 2.0, size=int(near.sum()))
    dist = rng.random((4, 6))
    dist /= dist.sum(axis=1, keepdims=True)
    yield "asl_loss", [logits], lambda: asl_loss(logits, targets, AslConfig())
    yield "asl_loss_fractional_gamma", [logits], lambda: asl_loss(
        logits, targets, AslConfig(gamma_neg=0.5, gamma_pos=1.5, margin=0.0))
    yield "bce_loss", [logits], lambda: bce_loss(logits, targets)
    yield "softmax_ce_loss", [logits], lambda: softmax_ce_loss(logits, dist)


def _head_cases(rng, seed):
    N, D, HW = 6, 4, 4
    tokens = Tensor(rng.normal(size=(2, HW, D + 1)))
    targets = (rng.random((2, N)) < 0.4).astype(float)
    cfg = dict(num_classes=N, model_dim=D, num_heads=2, ff_hidden_dim=6, embed_dim=D + 1,
               group_seed=seed)
    heads = {
        "gap_head": GapHead(N, D + 1, seed=seed),
        "transformer_decoder_head": TransformerDecoderHead(HeadConfig(**cfg), seed=seed),
        "ml_decoder_head_k_eq_n": MLDecoderHead(HeadConfig(**cfg), query_kind="learnable",
                                                seed=seed),
        "ml_decoder_head_grouped": MLDecoderHead(HeadConfig(num_queries=4, **cfg), seed=seed),
        "ml_decoder_head_shared_fc": MLDecoderHead(
            HeadConfig(num_queries=3, shared_group_fc=True, **cfg), seed=seed),
    }
    for name, head in heads.items():
        yield f"{name}+asl", head.parameters(), (
            lambda head=head: asl_loss(head(tokens), targets, AslConfig()))

    labels = [f"w{i}" for i in range(N + 2)]
    seen = np.array([True] * N + [False, False])
    table = WordEmbeddingTable(labels, rng.normal(size=(N + 2, 3)), seen)
    zsl = {
        "zsl_full": ZslConfig(model_dim=D, word_dim=3, embed_dim=D + 1, num_heads=2,
                              ff_hidden_dim=6),
        "zsl_group_nlp": ZslConfig(model_dim=D, word_dim=3, embed_dim=D + 1, num_heads=2,
                                   ff_hidden_dim=6, mode="group", group_size=2,
                                   group_seed=seed),
        "zsl_group_shared": ZslConfig(model_dim=D, word_dim=3, embed_dim=D + 1, num_heads=2,
                                      ff_hidden_dim=6, mode="group", group_size=2,
                                      head_type="shared", group_seed=seed),
    }
    for name, zcfg in zsl.items():
        model = ZslMLDecoder(zcfg, table, seed=seed)
        yield f"{name}+asl", model.parameters(), (
            lambda m=model: asl_loss(m(tokens), targets, AslConfig()))
    model = ZslMLDecoder(zsl["zsl_full"], table, seed=seed)
    aug = AugmentationConfig.preset("both", seed=seed, random_query_count=2)

    def augmented():
        logits, t = model.training_logits(tokens, targets, 3, aug)
        return asl_loss(logits, t, AslConfig())

    yield "zsl_full_augmented+asl", model.parameters(), augmented
    # a near-flat target against near-flat predictions leaves gradients of
    # order 1e-7, inside central-difference round-off, so draw peaked targets
    dist = rng.dirichlet(np.full(N, 0.3), size=2)
    # With one shared output vector, ff_norm.bias shifts every logit equally,
    # which softmax cross-entropy ignores: its gradient is exactly zero and is
    # checked separately by absolute size.
    identifiable = [p for p in model.parameters() if p.name != "ff_norm.bias"]
    yield "zsl_full+ce", identifiable, lambda: softmax_ce_loss(model(tokens), dist)


def shift_null_check(seed, h=1e-5, atol=1e-9):
    """Both gradients of CE w.r.t. the shift-only parameter must vanish."""
    rng = np.random.default_rng([seed, 11])
    labels = [f"w{i}" for i in range(6)]
    table = WordEmbeddingTable(labels, rng.normal(size=(6, 3)))
    model = ZslMLDecoder(ZslConfig(model_dim=4, word_dim=3, embed_dim=5, num_heads=2,
                                   ff_hidden_dim=6), table, seed=seed)
    tokens = Tensor(rng.normal(size=(2, 4, 5)))
    dist = rng.random((2, 6))
    dist /= dist.sum(axis=1, keepdims=True)
    bias = next(p for p in model.parameters() if p.name == "ff_norm.bias")
    with T.Tape() as tape:
        loss = softmax_ce_loss(model(tokens), dist)
        tape.backward(loss)
    analytic = np.abs(bias.grad).max()
    bias.grad = None
    worst = 0.0
    flat = bias.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = softmax_ce_loss(model(tokens), dist).item()
        flat[i] = orig - h
        fm = softmax_ce_loss(model(tokens), dist).item()
        flat[i] = orig
        worst = max(worst, abs(fp - fm) / (2 * h))
    return max(analytic, worst) < atol, analytic, worst


def gradient_suite(seeds=range(10), h=1e-5, tol=1e-4, include_heads=True):
    """Run every check for each seed; returns a flat list of results."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, params, fn in _op_cases(rng):
            probe = np.random.default_rng([seed, 7])
            shape = fn().shape
            R = Tensor(probe.normal(size=shape))
            f = (lambda fn=fn, R=R: T.sum_all(T.mul(fn(), R))) if shape else fn
            results.append(GradCheckResult(name, seed, finite_diff_check(f, params, h, tol)))
        for name, params, fn in _loss_cases(rng):
            results.append(GradCheckResult(name, seed, finite_diff_check(fn, params, h, tol)))
        if include_heads:
            for name, params, fn in _head_cases(rng, seed):
                results.append(GradCheckResult(name, seed, finite_diff_check(fn, params, h, tol)))
    return results
