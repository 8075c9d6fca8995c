"""Classification heads mapping a spatial embedding to per-class logits.

Three heads share one contract (tokens in, ``N`` logits out):

* GAP: spatial mean followed by a fully connected layer.
* Transformer decoder: self-attention, cross-attention, feed-forward and a
  per-class token pool, one query per class.
* ML-Decoder: the transformer decoder without self-attention, with ``K <= N``
  group queries expanded to ``N`` logits by the group fully-connected layer.

Every head accepts tokens of shape ``(HW, D_in)`` or ``(B, HW, D_in)``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import MultiHeadAttnParams, multi_head_attention, uniform_init
from .errors import ConfigError, DimensionError
from .tensor import (Parameter, Tensor, add, check_unique_names, layer_norm, matmul,
                     relu, reshape, group_matvec, take, transpose)

QUERY_KINDS = ("learnable", "fixed_random", "word_embedding")


@dataclass
class SpatialEmbedding:
    height: int
    width: int
    tokens: Tensor

    def __post_init__(self):
        self.tokens = self.tokens if isinstance(self.tokens, Tensor) else Tensor(self.tokens)
        if self.tokens.ndim < 2 or self.tokens.shape[-2] != self.height * self.width:
            raise DimensionError(
                f"expected {self.height}x{self.width}={self.height * self.width} tokens, "
                f"got tensor of shape {self.tokens.shape}")

    @property
    def dim(self):
        return self.tokens.shape[-1]

    @classmethod
    def from_grid(cls, grid):
        """Build from an ``(H, W, D)`` or ``(B, H, W, D)`` array."""
        grid = np.asarray(grid, dtype=np.float64)
        H, W, D = grid.shape[-3:]
        return cls(H, W, Tensor(grid.reshape(*grid.shape[:-3], H * W, D)))


def _tokens(e):
    return e.tokens if isinstance(e, SpatialEmbedding) else e


@dataclass
class QuerySet:
    values: Tensor
    kind: str

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise ConfigError(f"unknown query kind {self.kind!r}")
        if self.values.ndim != 2:
            raise DimensionError(f"queries must be K x D, got {self.values.shape}")
        if self.kind == "learnable" and not isinstance(self.values, Parameter):
            raise ConfigError("learnable queries must be a Parameter")

    @property
    def count(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def parameters(self):
        return [self.values] if isinstance(self.values, Parameter) else []


# ---------------------------------------------------------------------------
# group assignment


@dataclass(frozen=True)
class GroupAssignment:
    """Maps class ``i`` to group ``group_of[i]`` and slot ``slot_of[i]``.

    Classes occupy the flat positions ``group * group_size + slot`` and those
    positions are exactly ``0..N-1``, so flattening a ``K x g`` logit grid and
    truncating it to ``N`` entries loses nothing.
    """

    num_classes: int
    num_groups: int
    group_size: int
    seed: int
    group_of: np.ndarray = field(repr=False)
    slot_of: np.ndarray = field(repr=False)

    def __post_init__(self):
        N, K, g = self.num_classes, self.num_groups, self.group_size
        if not 1 <= K <= N:
            raise ConfigError(f"need 1 <= K <= N, got K={K}, N={N}")
        if g < 1 or K * g < N:
            raise ConfigError(f"{K} groups of size {g} cannot hold {N} classes")
        group_of = np.asarray(self.group_of, dtype=np.intp)
        slot_of = np.asarray(self.slot_of, dtype=np.intp)
        object.__setattr__(self, "group_of", group_of)
        object.__setattr__(self, "slot_of", slot_of)
        if group_of.shape != (N,) or slot_of.shape != (N,):
            raise ConfigError("assignment must list every class exactly once")
        if group_of.min() < 0 or group_of.max() >= K or slot_of.min() < 0 or slot_of.max() >= g:
            raise ConfigError("group or slot index out of range")
        if not np.array_equal(np.sort(self.positions), np.arange(N)):
            raise ConfigError("assignment positions must cover 0..N-1 exactly once")

    @property
    def positions(self):
        return self.group_of * self.group_size + self.slot_of

    def lookup(self, i):
        if not 0 <= i < self.num_classes:
            raise AssertionError(f"class {i} outside assignment of {self.num_classes} classes")
        return int(self.group_of[i]), int(self.slot_of[i])

    def members(self, k):
        """Classes of group ``k`` in slot order."""
        idx = np.flatnonzero(self.group_of == k)
        return idx[np.argsort(self.slot_of[idx])]

    @classmethod
    def identity(cls, num_classes, num_groups=None):
        """Class ``i`` at flat position ``i``: ``k = i div g``, ``j = i mod g``."""
        K = num_classes if num_groups is None else num_groups
        g = math.ceil(num_classes / K)
        i = np.arange(num_classes)
        return cls(num_classes, K, g, -1, i // g, i % g)

    def to_text(self):
        lines = [f"{self.num_classes} {self.num_groups} {self.group_size} {self.seed}"]
        lines += [f"{i}\t{k}\t{j}" for i, (k, j) in enumerate(zip(self.group_of, self.slot_of))]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        rows = [ln for ln in text.splitlines() if ln.strip()]
        if not rows:
            raise ConfigError("empty assignment file")
        try:
            N, K, g, seed = (int(v) for v in rows[0].split())
            body = [tuple(int(v) for v in ln.split("\t")) for ln in rows[1:]]
        except ValueError as exc:
            raise ConfigError(f"malformed assignment file: {exc}") from exc
        if len(body) != N or sorted(r[0] for r in body) != list(range(N)):
            raise ConfigError("assignment file must list every class index exactly once")
        body.sort()
        return cls(N, K, g, seed, [r[1] for r in body], [r[2] for r in body])

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def make_group_assignment(num_classes, num_groups, seed, group_size=None):
    """Deal a seeded random permutation of the classes into groups.

    ``group_size`` defaults to ``ceil(N / K)``; the last group may be short.
    """
    N, K = num_classes, num_groups
    if not 1 <= K <= N:
        raise ConfigError(f"number of groups K={K} must be in [1, N={N}]")
    g = math.ceil(N / K) if group_size is None else group_size
    perm = np.random.default_rng(seed).permutation(N)
    group_of = np.empty(N, dtype=np.intp)
    slot_of = np.empty(N, dtype=np.intp)
    group_of[perm] = np.arange(N) // g
    slot_of[perm] = np.arange(N) % g
    return GroupAssignment(N, K, g, seed, group_of, slot_of)


# ---------------------------------------------------------------------------
# group fully-connected


@dataclass
class GroupFcParams:
    """``K x g x D`` group projections, or one shared ``g x D`` matrix."""

    weight: Parameter
    shared: bool = False

    def __post_init__(self):
        if self.weight.ndim != (2 if self.shared else 3):
            raise DimensionError(f"group fc weight has shape {self.weight.shape}")

    @classmethod
    def init(cls, num_groups, group_size, dim, rng, shared=False, name="group_fc.weight"):
        shape = (group_size, dim) if shared else (num_groups, group_size, dim)
        return cls(uniform_init(rng, shape, dim, name), shared)

    def matrix(self, k):
        return self.weight.data if self.shared else self.weight.data[k]

    def parameters(self):
        return [self.weight]


def _check_group_fc(G, params, assignment):
    K, g = assignment.num_groups, assignment.group_size
    wshape = params.weight.shape
    if params.shared:
        expect = (g, G.shape[-1])
    else:
        expect = (K, g, G.shape[-1])
    if G.ndim < 2 or G.shape[-2] != K or wshape != expect:
        raise DimensionError(
            f"group fc: queries {G.shape} and weight {wshape} do not match K={K}, g={g}")


def group_fully_connected(G: Tensor, params: GroupFcParams, assignment: GroupAssignment) -> Tensor:
    """Logit ``i`` is entry ``j`` of ``W_k @ G_k`` where ``(k, j) = assignment(i)``."""
    _check_group_fc(G, params, assignment)
    flat = group_matvec(G, params.weight, assignment.num_classes)
    return take(flat, assignment.positions, axis=-1)


def _stacked(params: GroupFcParams, K):
    w = params.weight.data
    return np.broadcast_to(w, (K, *w.shape)) if params.shared else w


def _group_rows(assignment: GroupAssignment, k):
    # real classes in group k; padded slots past N are never computed
    return max(0, min(assignment.group_size, assignment.num_classes - k * assignment.group_size))


def group_fc_loop(G, params: GroupFcParams, assignment: GroupAssignment):
    """Per-group loop over a single ``K x D`` query array, then flatten and truncate."""
    G = np.asarray(G.data if isinstance(G, Tensor) else G)
    K, g, N = assignment.num_groups, assignment.group_size, assignment.num_classes
    output = np.zeros((K, g))
    for k in range(K):
        rows = _group_rows(assignment, k)
        if rows:
            output[k, :rows] = np.matmul(params.matrix(k)[:rows], G[k][:, None])[:, 0]
    return output.reshape(-1)[:N][assignment.positions]


def group_fc_batched(G, params: GroupFcParams, assignment: GroupAssignment):
    """Full groups as one stacked contraction plus the short tail, flattened to ``N``."""
    G = np.asarray(G.data if isinstance(G, Tensor) else G)
    K, g, N = assignment.num_groups, assignment.group_size, assignment.num_classes
    full, r = divmod(N, g)
    w = _stacked(params, K)
    out = [np.matmul(w[:full], G[:full, :, None])[..., 0].reshape(-1)]
    if r:
        out.append(np.matmul(w[full, :r], G[full][:, None])[:, 0])
    return np.concatenate(out)[assignment.positions]


# ---------------------------------------------------------------------------
# shared blocks


@dataclass
class LayerNormParams:
    gain: Parameter
    bias: Parameter

    @classmethod
    def init(cls, dim, name="ln"):
        return cls(Parameter(np.ones(dim), f"{name}.gain"), Parameter(np.zeros(dim), f"{name}.bias"))

    def parameters(self):
        return [self.gain, self.bias]


@dataclass
class FeedForwardParams:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def init(cls, dim, hidden, rng, name="ff"):
        return cls(uniform_init(rng, (dim, hidden), dim, f"{name}.w1"),
                   uniform_init(rng, (hidden,), dim, f"{name}.b1"),
                   uniform_init(rng, (hidden, dim), hidden, f"{name}.w2"),
                   uniform_init(rng, (dim,), hidden, f"{name}.b2"))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


def feed_forward(x: Tensor, ff: FeedForwardParams) -> Tensor:
    return add(matmul(relu(add(matmul(x, ff.w1), ff.b1)), ff.w2), ff.b2)


def _wrap(x, out, norm, residual):
    # post-norm residual: x <- LayerNorm(x + block(x))
    return layer_norm(add(x, out), norm.gain, norm.bias) if residual else out


def project_embedding(e, proj: Parameter | None) -> Tensor:
    tokens = _tokens(e)
    if proj is None:
        return tokens
    if proj.ndim != 2 or proj.shape[0] != tokens.shape[-1]:
        raise DimensionError(f"projection {proj.shape} does not accept tokens {tokens.shape}")
    return matmul(tokens, proj)


# ---------------------------------------------------------------------------
# GAP head


@dataclass
class GapHeadParams:
    fc_weight: Parameter  # N x D_in

    def parameters(self):
        return [self.fc_weight]


def gap_head(e, params: GapHeadParams) -> Tensor:
    tokens = _tokens(e)
    hw, d_in = tokens.shape[-2:]
    N = params.fc_weight.shape[0]
    if params.fc_weight.shape[1] != d_in:
        raise DimensionError(f"fc weight {params.fc_weight.shape} vs token dim {d_in}")
    avg = Tensor(np.full((1, hw), 1.0 / hw))
    z = matmul(avg, tokens)
    logits = matmul(z, transpose(params.fc_weight))
    return reshape(logits, (*tokens.shape[:-2], N))


# ---------------------------------------------------------------------------
# decoder heads


@dataclass
class TransformerDecoderParams:
    proj: Parameter | None
    self_attn: MultiHeadAttnParams
    self_norm: LayerNormParams
    cross_attn: MultiHeadAttnParams
    cross_norm: LayerNormParams
    ff: FeedForwardParams
    ff_norm: LayerNormParams
    pool: GroupFcParams
    residual: bool = True
    token_pool: str = "linear"

    def parameters(self):
        ps = [] if self.proj is None else [self.proj]
        ps += self.self_attn.parameters() + self.cross_attn.parameters() + self.ff.parameters()
        if self.residual:
            ps += self.self_norm.parameters() + self.cross_norm.parameters() + self.ff_norm.parameters()
        if self.token_pool == "linear":
            ps += self.pool.parameters()
        return ps


@dataclass
class MLDecoderParams:
    proj: Parameter | None
    cross_attn: MultiHeadAttnParams
    cross_norm: LayerNormParams
    ff: FeedForwardParams
    ff_norm: LayerNormParams
    group_fc: GroupFcParams
    assignment: GroupAssignment
    residual: bool = True

    def parameters(self):
        ps = [] if self.proj is None else [self.proj]
        ps += self.cross_attn.parameters() + self.ff.parameters()
        if self.residual:
            ps += self.cross_norm.parameters() + self.ff_norm.parameters()
        return ps + self.group_fc.parameters()


def token_pool(x: Tensor, params: TransformerDecoderParams) -> Tensor:
    N, D = x.shape[-2:]
    if params.token_pool == "mean":
        out = matmul(x, Tensor(np.full((D, 1), 1.0 / D)))
        return reshape(out, (*x.shape[:-2], N))
    return group_fully_connected(x, params.pool, GroupAssignment.identity(N))


def self_attention_stage(queries: QuerySet, params: TransformerDecoderParams) -> Tensor:
    q = queries.values
    return _wrap(q, multi_head_attention(params.self_attn, q, q, q), params.self_norm,
                 params.residual)


def decode_queries(q: Tensor, E: Tensor, cross_attn, cross_norm, ff, ff_norm, residual):
    """Cross-attention of ``q`` onto the tokens followed by the feed-forward block."""
    q2 = _wrap(q, multi_head_attention(cross_attn, q, E, E), cross_norm, residual)
    return _wrap(q2, feed_forward(q2, ff), ff_norm, residual)


def transformer_decoder_head(e, queries: QuerySet, params: TransformerDecoderParams) -> Tensor:
    N = params.pool.weight.shape[0]
    if queries.count != N:
        raise ConfigError(f"transformer decoder needs one query per class: K={queries.count}, N={N}")
    E = project_embedding(e, params.proj)
    q1 = self_attention_stage(queries, params)
    q3 = decode_queries(q1, E, params.cross_attn, params.cross_norm, params.ff, params.ff_norm,
                        params.residual)
    return token_pool(q3, params)


def ml_decoder_head(e, group_queries: QuerySet, params: MLDecoderParams) -> Tensor:
    if group_queries.count != params.assignment.num_groups:
        raise DimensionError(
            f"{group_queries.count} group queries for {params.assignment.num_groups} groups")
    E = project_embedding(e, params.proj)
    if E.shape[-1] != group_queries.dim:
        raise DimensionError(f"token dim {E.shape[-1]} != query dim {group_queries.dim}")
    g2 = decode_queries(group_queries.values, E, params.cross_attn, params.cross_norm, params.ff,
                        params.ff_norm, params.residual)
    return group_fully_connected(g2, params.group_fc, params.assignment)


# ---------------------------------------------------------------------------
# configured models


@dataclass
class HeadConfig:
    num_classes: int
    model_dim: int
    num_queries: int | None = None
    num_heads: int = 1
    ff_hidden_dim: int | None = None
    embed_dim: int | None = None
    shared_group_fc: bool = False
    residual: bool = True
    token_pool: str = "linear"
    group_seed: int = 0
    group_assignment: GroupAssignment | None = None

    def __post_init__(self):
        if self.num_queries is None:
            self.num_queries = self.num_classes
        if self.ff_hidden_dim is None:
            self.ff_hidden_dim = 4 * self.model_dim
        if self.embed_dim is None:
            self.embed_dim = self.model_dim
        if not 1 <= self.num_queries <= self.num_classes:
            raise ConfigError(f"need 1 <= K <= N, got K={self.num_queries}, N={self.num_classes}")
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ConfigError(f"num_heads={self.num_heads} must divide model_dim={self.model_dim}")
        if self.token_pool not in ("linear", "mean"):
            raise ConfigError(f"unknown token pool {self.token_pool!r}")
        if self.group_assignment is None:
            self.group_assignment = make_group_assignment(
                self.num_classes, self.num_queries, self.group_seed)
        a = self.group_assignment
        if a.num_classes != self.num_classes or a.num_groups != self.num_queries:
            raise ConfigError("group assignment does not match N and K")

    @property
    def group_size(self):
        return self.group_assignment.group_size


def _adapter(cfg, rng):
    if cfg.embed_dim == cfg.model_dim:
        return None
    return uniform_init(rng, (cfg.embed_dim, cfg.model_dim), cfg.embed_dim, "proj")


def _make_queries(kind, K, D, rng):
    values = uniform_init(rng, (K, D), D, "queries")
    if kind == "learnable":
        return QuerySet(values, kind)
    if kind == "fixed_random":
        return QuerySet(Tensor(values.data), kind)
    raise ConfigError(f"query kind {kind!r} needs explicit values")


class _Model:
    def parameters(self):
        ps = self._parameters()
        check_unique_names(ps)
        return ps

    def buffers(self):
        """Fixed (non-trained) tensors that still belong in a checkpoint."""
        queries = getattr(self, "queries", None)
        if queries is None or queries.parameters():
            return {}
        return {"queries": queries.values}

    def state_dict(self):
        state = {p.name: p.data.copy() for p in self.parameters()}
        state.update({name: t.data.copy() for name, t in self.buffers().items()})
        return state

    def load_state_dict(self, state):
        named = [(p.name, p) for p in self.parameters()] + list(self.buffers().items())
        for name, t in named:
            if name not in state:
                raise ConfigError(f"checkpoint lacks parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def __call__(self, tokens):
        return self.forward(tokens)


class GapHead(_Model):
    kind = "gap"

    def __init__(self, num_classes, embed_dim, seed=0):
        rng = np.random.default_rng(seed)
        self.params = GapHeadParams(uniform_init(rng, (num_classes, embed_dim), embed_dim, "fc.weight"))

    def _parameters(self):
        return self.params.parameters()

    def forward(self, tokens):
        return gap_head(tokens, self.params)


class TransformerDecoderHead(_Model):
    kind = "transformer"

    def __init__(self, config: HeadConfig, query_kind="learnable", seed=0, queries=None):
        cfg = self.config = config
        if cfg.num_queries != cfg.num_classes:
            raise ConfigError("transformer decoder uses one query per class (K == N)")
        rng = np.random.default_rng(seed)
        D = cfg.model_dim
        self.params = TransformerDecoderParams(
            proj=_adapter(cfg, rng),
            self_attn=MultiHeadAttnParams.init(D, cfg.num_heads, rng, "self_attn"),
            self_norm=LayerNormParams.init(D, "self_norm"),
            cross_attn=MultiHeadAttnParams.init(D, cfg.num_heads, rng, "cross_attn"),
            cross_norm=LayerNormParams.init(D, "cross_norm"),
            ff=FeedForwardParams.init(D, cfg.ff_hidden_dim, rng),
            ff_norm=LayerNormParams.init(D, "ff_norm"),
            pool=GroupFcParams.init(cfg.num_classes, 1, D, rng, name="pool.weight"),
            residual=cfg.residual,
            token_pool=cfg.token_pool,
        )
        self.queries = queries if queries is not None else _make_queries(
            query_kind, cfg.num_classes, D, rng)

    def _parameters(self):
        return self.queries.parameters() + self.params.parameters()

    def forward(self, tokens):
        return transformer_decoder_head(tokens, self.queries, self.params)


class MLDecoderHead(_Model):
    kind = "mldecoder"

    def __init__(self, config: HeadConfig, query_kind="fixed_random", seed=0, queries=None):
        cfg = self.config = config
        rng = np.random.default_rng(seed)
        D = cfg.model_dim
        self.params = MLDecoderParams(
            proj=_adapter(cfg, rng),
            cross_attn=MultiHeadAttnParams.init(D, cfg.num_heads, rng, "cross_attn"),
            cross_norm=LayerNormParams.init(D, "cross_norm"),
            ff=FeedForwardParams.init(D, cfg.ff_hidden_dim, rng),
            ff_norm=LayerNormParams.init(D, "ff_norm"),
            group_fc=GroupFcParams.init(cfg.num_queries, cfg.group_size, D, rng,
                                        shared=cfg.shared_group_fc),
            assignment=cfg.group_assignment,
            residual=cfg.residual,
        )
        self.queries = queries if queries is not None else _make_queries(
            query_kind, cfg.num_queries, D, rng)

    def _parameters(self):
        return self.queries.parameters() + self.params.parameters()

    def forward(self, tokens):
        return ml_decoder_head(tokens, self.queries, self.params)


def strip_self_attention(td: TransformerDecoderHead) -> MLDecoderHead:
    """ML-Decoder reproducing ``td`` exactly, with self-attention folded into fixed queries.

    Self-attention over the queries does not see the image, so its output is a
    constant; feeding that constant as fixed queries and sharing every other
    weight gives identical logits.
    """
    cfg = td.config
    if cfg.token_pool != "linear":
        raise ConfigError("weight copy needs the per-class linear token pool")
    q1 = self_attention_stage(td.queries, td.params)
    ml_cfg = HeadConfig(num_classes=cfg.num_classes, model_dim=cfg.model_dim,
                        num_queries=cfg.num_classes, num_heads=cfg.num_heads,
                        ff_hidden_dim=cfg.ff_hidden_dim, embed_dim=cfg.embed_dim,
                        residual=cfg.residual,
                        group_assignment=GroupAssignment.identity(cfg.num_classes))
    ml = MLDecoderHead(ml_cfg, queries=QuerySet(Tensor(q1.data), "fixed_random"))
    p = td.params
    ml.params = MLDecoderParams(p.proj, p.cross_attn, p.cross_norm, p.ff, p.ff_norm,
                                GroupFcParams(p.pool.weight), ml_cfg.group_assignment,
                                residual=p.residual)
    return ml
