"""Zero-shot ML-Decoder: word-embedding queries, ZSL group decoding, query augmentations."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import MultiHeadAttnParams, uniform_init
from .errors import ConfigError, ContractError, DimensionError, LabelLookupError
from .heads import (FeedForwardParams, GroupAssignment, GroupFcParams, LayerNormParams,
                    QuerySet, _Model, decode_queries, group_fc_loop, group_fully_connected,
                    make_group_assignment, project_embedding)
from .tensor import (Parameter, Tensor, add, concat, matmul, reshape, group_matvec, take,
                     transpose)


@dataclass
class WordEmbeddingTable:
    labels: list
    vectors: np.ndarray
    seen_mask: np.ndarray | None = None

    def __post_init__(self):
        self.labels = [str(x) for x in self.labels]
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.labels):
            raise DimensionError(
                f"{len(self.labels)} labels but vectors of shape {self.vectors.shape}")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("duplicate labels in word-embedding table")
        if self.seen_mask is None:
            self.seen_mask = np.ones(len(self.labels), dtype=bool)
        self.seen_mask = np.asarray(self.seen_mask, dtype=bool)
        if self.seen_mask.shape != (len(self.labels),):
            raise DimensionError("seen mask must have one entry per label")
        if not self.seen_mask.any():
            raise ConfigError("word-embedding table needs at least one seen label")
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def seen_labels(self):
        return [lab for lab, s in zip(self.labels, self.seen_mask) if s]

    @property
    def unseen_labels(self):
        return [lab for lab, s in zip(self.labels, self.seen_mask) if not s]

    def index(self, label):
        try:
            return self._index[label]
        except KeyError:
            raise LabelLookupError(f"unknown label {label!r}") from None

    def rows(self, labels):
        return self.vectors[[self.index(lab) for lab in labels]]

    def with_vectors(self, labels, vectors):
        """Copy with the vectors of ``labels`` replaced."""
        new = self.vectors.copy()
        new[[self.index(lab) for lab in labels]] = vectors
        return WordEmbeddingTable(list(self.labels), new, self.seen_mask.copy())


def load_word_embeddings(path, split_path=None):
    """Read ``label v1 v2 ...`` lines (GloVe text layout) and an optional split file."""
    labels, rows = [], []
    path = Path(path)
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad number ({exc})") from exc
        if rows[-1] == [] or len(rows[-1]) != len(rows[0]):
            raise ConfigError(f"{path}:{lineno}: expected {len(rows[0])} values after the label")
        if parts[0] in labels:
            raise ConfigError(f"{path}:{lineno}: duplicate label {parts[0]!r}")
        labels.append(parts[0])
    if not labels:
        raise ConfigError(f"{path}: no embeddings found")
    seen = None
    if split_path is not None:
        split = load_split(split_path)
        missing = set(labels) - set(split)
        if missing:
            raise ConfigError(f"{split_path}: no split entry for {sorted(missing)[:5]}")
        seen = [split[lab] for lab in labels]
    return WordEmbeddingTable(labels, np.array(rows), seen)


def load_split(path):
    """``label<TAB>seen|unseen`` per line -> {label: is_seen}."""
    split = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2 or parts[1] not in ("seen", "unseen"):
            raise ConfigError(f"{path}:{lineno}: expected 'label<TAB>seen|unseen'")
        split[parts[0]] = parts[1] == "seen"
    return split


def save_word_embeddings(table: WordEmbeddingTable, path):
    lines = [lab + " " + " ".join(repr(float(v)) for v in vec)
             for lab, vec in zip(table.labels, table.vectors)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_split(table: WordEmbeddingTable, path):
    lines = [f"{lab}\t{'seen' if s else 'unseen'}" for lab, s in zip(table.labels, table.seen_mask)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# query construction


def word_queries(table: WordEmbeddingTable, labels) -> QuerySet:
    if not labels:
        raise ConfigError("label subset must be nonempty")
    return QuerySet(Tensor(table.rows(labels)), "word_embedding")


def project_queries(queries: QuerySet, proj: Parameter | None) -> QuerySet:
    if proj is None:
        return queries
    if proj.shape[1] != queries.dim:
        raise DimensionError(f"projection {proj.shape} vs query dim {queries.dim}")
    return QuerySet(matmul(queries.values, transpose(proj)), queries.kind)


def build_full_decoding_queries(table, label_subset, proj=None) -> QuerySet:
    """One query ``proj @ N_i`` per label, in ``label_subset`` order."""
    return project_queries(word_queries(table, list(label_subset)), proj)


def _slot_layout(assignment: GroupAssignment):
    # position -> class index, with N standing for an empty (zero) slot
    K, g, N = assignment.num_groups, assignment.group_size, assignment.num_classes
    idx = np.full(K * g, N, dtype=np.intp)
    idx[assignment.positions] = np.arange(N)
    return idx


def group_queries_from_vectors(vectors: Tensor, assignment: GroupAssignment, w_a) -> Tensor:
    K, g, N = assignment.num_groups, assignment.group_size, assignment.num_classes
    if vectors.shape[0] != N:
        raise DimensionError(f"{vectors.shape[0]} word vectors for {N} classes")
    part = w_a.shape[0]
    proj = matmul(vectors, transpose(w_a))  # N x D/g
    padded = concat([proj, Tensor(np.zeros((1, part)))], axis=0)
    slots = take(padded, _slot_layout(assignment))
    return reshape(slots, (K, g * part))


def build_group_queries_zsl(table, assignment: GroupAssignment, w_a, labels=None,
                            model_dim=None) -> QuerySet:
    """Group query ``k`` concatenates ``W_a @ N_i`` over its members in slot order.

    Missing slots of a short group are zero.
    """
    g = assignment.group_size
    if model_dim is not None and (model_dim % g or w_a.shape[0] != model_dim // g):
        raise ConfigError(f"model dim {model_dim} must equal group size {g} x {w_a.shape[0]}")
    labels = table.labels if labels is None else list(labels)
    vecs = Tensor(table.rows(labels))
    return QuerySet(group_queries_from_vectors(vecs, assignment, w_a), "word_embedding")


def zsl_group_fc(G: Tensor, word_vectors, assignment: GroupAssignment, w_b) -> Tensor:
    """Group FC with ``W_k = W_b @ M_k``: logit ``i`` is ``(W_b N_i) . G_k``."""
    vecs = word_vectors if isinstance(word_vectors, Tensor) else Tensor(word_vectors)
    if vecs.shape[0] != assignment.num_classes or vecs.shape[1] != w_b.shape[1]:
        raise DimensionError(
            f"word vectors {vecs.shape} do not fit {assignment.num_classes} classes / W_b {w_b.shape}")
    if G.shape[-1] != w_b.shape[0]:
        raise DimensionError(f"queries {G.shape} vs W_b {w_b.shape}")
    rows = matmul(vecs, transpose(w_b))  # row i = W_b @ N_i
    K, g, N = assignment.num_groups, assignment.group_size, assignment.num_classes
    padded = concat([rows, Tensor(np.zeros((1, rows.shape[1])))], axis=0)
    weight = reshape(take(padded, _slot_layout(assignment)), (K, g, rows.shape[1]))
    return take(group_matvec(G, weight, N), assignment.positions, axis=-1)


def zsl_group_fc_loop(G, word_vectors, assignment: GroupAssignment, w_b):
    """Explicit per-class weight construction, then the per-group loop."""
    K, g = assignment.num_groups, assignment.group_size
    wb = w_b.data if isinstance(w_b, Tensor) else np.asarray(w_b)
    vecs = np.asarray(word_vectors)
    group_weights = np.zeros((K, g, wb.shape[0]))
    for i in range(assignment.num_classes):
        k, j = assignment.lookup(i)
        group_weights[k, j, :] = matmul(Tensor(vecs[i][None, :]), Tensor(wb.T)).data[0]
    return group_fc_loop(G, GroupFcParams(Parameter(group_weights, "w")), assignment)


# ---------------------------------------------------------------------------
# query augmentations


@dataclass
class AugmentationConfig:
    """Training-time query perturbations.

    ``random_query_count=None`` appends ``max(1, K // 10)`` random queries per
    batch; ``0`` disables random queries. ``noise_sigma=0`` disables noise.
    """

    random_query_count: int | None = None
    random_query_target: str = "positive"
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.random_query_count is not None and self.random_query_count < 0:
            raise ConfigError("random_query_count must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.random_query_target not in ("positive", "negative"):
            raise ConfigError("random_query_target must be 'positive' or 'negative'")

    @classmethod
    def preset(cls, name, seed=0, **kw):
        counts = {"none": (0, 0.0), "noise": (0, None), "random-query": (None, 0.0),
                  "both": (None, None)}
        if name not in counts:
            raise ConfigError(f"unknown augmentation preset {name!r}")
        r, s = counts[name]
        cfg = cls(seed=seed, **kw)
        if r is not None:
            cfg.random_query_count = r
        if s is not None:
            cfg.noise_sigma = s
        return cfg

    def count_for(self, K):
        return max(1, K // 10) if self.random_query_count is None else self.random_query_count

    @property
    def enabled(self):
        return self.count_for(1) > 0 or self.noise_sigma > 0


def _require_training(training):
    if not training:
        raise ContractError("query augmentations are applied during training only")


def augment_random_query(queries: QuerySet, targets, cfg: AugmentationConfig, batch_index=0,
                         training=True):
    """Append random queries drawn uniformly from the per-dimension query range."""
    _require_training(training)
    targets = np.asarray(targets, dtype=np.float64)
    R = cfg.count_for(queries.count)
    if R == 0:
        return queries, targets
    if queries.kind == "learnable":
        raise ContractError("random-query augmentation expects fixed queries")
    vals = queries.values.data
    rng = np.random.default_rng([cfg.seed, batch_index, 1])
    extra = rng.uniform(vals.min(axis=0), vals.max(axis=0), size=(R, vals.shape[1]))
    fill = 1.0 if cfg.random_query_target == "positive" else 0.0
    pad = np.full((*targets.shape[:-1], R), fill)
    new_vals = concat([queries.values, Tensor(extra)], axis=0)
    return QuerySet(new_vals, queries.kind), np.concatenate([targets, pad], axis=-1)


def noise_scale(queries: QuerySet, sigma):
    vals = queries.values.data
    return sigma * float(np.linalg.norm(vals, axis=1).mean()) / math.sqrt(vals.shape[1])


def augment_query_noise(queries: QuerySet, cfg: AugmentationConfig, batch_index=0, training=True):
    """Add Gaussian noise with std ``sigma * mean|q| / sqrt(D)``, fresh per batch."""
    _require_training(training)
    if cfg.noise_sigma == 0:
        return queries
    if queries.kind == "learnable":
        raise ContractError("query-noise augmentation expects fixed queries")
    rng = np.random.default_rng([cfg.seed, batch_index, 2])
    noise = rng.normal(0.0, noise_scale(queries, cfg.noise_sigma), size=queries.values.shape)
    return QuerySet(add(queries.values, Tensor(noise)), queries.kind)


# ---------------------------------------------------------------------------
# model


@dataclass
class ZslConfig:
    model_dim: int
    word_dim: int
    embed_dim: int | None = None
    num_heads: int = 1
    ff_hidden_dim: int | None = None
    mode: str = "full"
    group_size: int = 1
    head_type: str = "nlp"
    residual: bool = True
    group_seed: int = 0

    def __post_init__(self):
        if self.embed_dim is None:
            self.embed_dim = self.model_dim
        if self.ff_hidden_dim is None:
            self.ff_hidden_dim = 4 * self.model_dim
        if self.mode not in ("full", "group"):
            raise ConfigError(f"unknown ZSL decoding mode {self.mode!r}")
        if self.head_type not in ("nlp", "shared"):
            raise ConfigError(f"unknown ZSL head type {self.head_type!r}")
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ConfigError(f"num_heads={self.num_heads} must divide model_dim={self.model_dim}")
        if self.mode == "group" and (self.group_size < 1 or self.model_dim % self.group_size):
            raise ConfigError(
                f"group size {self.group_size} must divide model dim {self.model_dim}")
        if self.mode == "full":
            self.group_size = 1


class ZslMLDecoder(_Model):
    """ML-Decoder whose queries and output weights are derived from word vectors.

    Full decoding uses one query per requested label and a single shared
    output vector, so any label set can be scored without changing weights.
    Group decoding builds each group query by concatenating projected word
    vectors and forms its output weights as ``W_b @ M_k``.
    """

    kind = "zsl"

    def __init__(self, config: ZslConfig, table: WordEmbeddingTable, seed=0,
                 assignment: GroupAssignment | None = None):
        cfg = self.config = config
        if assignment is not None and assignment.group_size != cfg.group_size:
            raise ConfigError(f"assignment group size {assignment.group_size} != "
                              f"configured {cfg.group_size}")
        self.assignment = assignment
        if table.dim != cfg.word_dim:
            raise DimensionError(f"table dim {table.dim} != configured word dim {cfg.word_dim}")
        self.table = table
        rng = np.random.default_rng(seed)
        D, d_w, g = cfg.model_dim, cfg.word_dim, cfg.group_size
        self.proj = None if cfg.embed_dim == D else uniform_init(
            rng, (cfg.embed_dim, D), cfg.embed_dim, "proj")
        self.cross_attn = MultiHeadAttnParams.init(D, cfg.num_heads, rng, "cross_attn")
        self.cross_norm = LayerNormParams.init(D, "cross_norm")
        self.ff = FeedForwardParams.init(D, cfg.ff_hidden_dim, rng)
        self.ff_norm = LayerNormParams.init(D, "ff_norm")
        self.query_proj = self.w_a = self.w_b = self.shared_fc = None
        if cfg.mode == "full":
            if d_w != D:
                self.query_proj = uniform_init(rng, (D, d_w), d_w, "query_proj")
            self.shared_fc = GroupFcParams.init(1, 1, D, rng, shared=True, name="group_fc.weight")
        else:
            self.w_a = uniform_init(rng, (D // g, d_w), d_w, "w_a")
            if cfg.head_type == "nlp":
                self.w_b = uniform_init(rng, (D, d_w), d_w, "w_b")
            else:
                self.shared_fc = GroupFcParams.init(1, g, D, rng, shared=True,
                                                    name="group_fc.weight")

    def _parameters(self):
        ps = [] if self.proj is None else [self.proj]
        ps += self.cross_attn.parameters() + self.ff.parameters()
        if self.config.residual:
            ps += self.cross_norm.parameters() + self.ff_norm.parameters()
        for extra in (self.query_proj, self.w_a, self.w_b):
            if extra is not None:
                ps.append(extra)
        if self.shared_fc is not None:
            ps += self.shared_fc.parameters()
        return ps

    def assignment_for(self, labels):
        """The pinned assignment when sizes match, else a seeded one for ``len(labels)``."""
        n = len(labels)
        if self.assignment is not None and self.assignment.num_classes == n:
            return self.assignment
        g = self.config.group_size
        return make_group_assignment(n, math.ceil(n / g), self.config.group_seed, group_size=g)

    def _decode(self, tokens, queries: Tensor):
        E = project_embedding(tokens, self.proj)
        return decode_queries(queries, E, self.cross_attn, self.cross_norm, self.ff, self.ff_norm,
                              self.config.residual)

    def _logits(self, tokens, qs: QuerySet, labels):
        """``qs`` holds raw word vectors, possibly augmented with extra rows."""
        if self.config.mode == "full":
            q = project_queries(qs, self.query_proj).values
            G = self._decode(tokens, q)
            n = q.shape[0]
            return group_fully_connected(G, self.shared_fc, GroupAssignment.identity(n))
        n = qs.count
        assignment = self.assignment_for(range(n))
        G = self._decode(tokens, group_queries_from_vectors(qs.values, assignment, self.w_a))
        if self.w_b is not None:
            return zsl_group_fc(G, Tensor(self.table.rows(labels)), assignment, self.w_b)
        return group_fully_connected(G, self.shared_fc, assignment)

    def forward(self, tokens, labels=None):
        labels = self.table.seen_labels if labels is None else list(labels)
        return self._logits(tokens, word_queries(self.table, labels), labels)

    def training_logits(self, tokens, targets, batch_index, aug: AugmentationConfig | None,
                        labels=None):
        labels = self.table.seen_labels if labels is None else list(labels)
        qs = word_queries(self.table, labels)
        targets = np.asarray(targets, dtype=np.float64)
        if aug is not None:
            qs = augment_query_noise(qs, aug, batch_index)
            if aug.count_for(qs.count) > 0:
                if self.config.mode != "full":
                    raise ConfigError("random-query augmentation needs full decoding")
                qs, targets = augment_random_query(qs, targets, aug, batch_index)
        return self._logits(tokens, qs, labels), targets


def inference_labels(table: WordEmbeddingTable, mode):
    if mode == "ZSL":
        if not table.unseen_labels:
            raise ConfigError("ZSL inference needs at least one unseen label")
        return table.unseen_labels
    if mode == "GZSL":
        return table.seen_labels + table.unseen_labels
    raise ConfigError(f"unknown inference mode {mode!r}")


def shuffled_unseen_table(table: WordEmbeddingTable, seed=0):
    """Copy of ``table`` whose unseen labels carry each other's vectors (no fixed points)."""
    unseen = table.unseen_labels
    if len(unseen) < 2:
        raise ConfigError("shuffling needs at least two unseen labels")
    order = np.random.default_rng(seed).permutation(len(unseen))
    derangement = np.empty_like(order)
    derangement[order] = np.roll(order, 1)
    return table.with_vectors(unseen, table.rows([unseen[i] for i in derangement]))


def zsl_inference(model: ZslMLDecoder, tokens, mode="ZSL", table=None):
    """Score unseen labels (ZSL) or seen followed by unseen labels (GZSL)."""
    table = model.table if table is None else table
    labels = inference_labels(table, mode)
    saved, model.table = model.table, table
    try:
        logits = model.forward(tokens, labels)
    finally:
        model.table = saved
    return logits, labels
