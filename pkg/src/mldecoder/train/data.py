"""Synthetic multi-label image-embedding data with correlated word vectors.

Each class owns a visual prototype in token space and a word vector
``A @ prototype + noise``. An image is an ``H x W`` grid of Gaussian background
tokens; every object present adds its prototype (plus noise) to a random
rectangular patch. The shared linear map ``A`` is what lets a model trained on
seen classes score unseen ones.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..zsl import WordEmbeddingTable

CACHE_MAGIC = b"MLDDATA\0"
CACHE_VERSION = 1


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 20
    num_unseen: int = 0
    height: int = 4
    width: int = 4
    embed_dim: int = 16
    word_dim: int = 16
    num_train: int = 400
    num_eval: int = 200
    min_objects: int = 1
    max_objects: int = 3
    patch_min: int = 1
    patch_max: int = 2
    background_noise: float = 0.5
    prototype_noise: float = 0.1
    word_noise: float = 0.1
    signal: float = 1.0
    orthogonal_prototypes: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or not 0 <= self.num_unseen < self.num_classes:
            raise ConfigError("need at least one seen class and 0 <= num_unseen < num_classes")
        if not 1 <= self.patch_min <= self.patch_max:
            raise ConfigError("need 1 <= patch_min <= patch_max")
        if self.patch_max > min(self.height, self.width):
            raise ConfigError(
                f"patch size {self.patch_max} larger than the {self.height}x{self.width} grid")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")
        if self.max_objects > self.num_classes - self.num_unseen:
            raise ConfigError("max_objects exceeds the number of seen classes")
        if self.orthogonal_prototypes and self.num_classes > self.embed_dim:
            raise ConfigError("orthogonal prototypes need num_classes <= embed_dim")

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class Split:
    tokens: np.ndarray  # (num_images, H*W, D_in)
    targets: np.ndarray  # (num_images, len(labels))
    labels: list

    def columns(self, labels):
        pos = {lab: i for i, lab in enumerate(self.labels)}
        return self.targets[:, [pos[lab] for lab in labels]]

    def __len__(self):
        return self.tokens.shape[0]


@dataclass
class SyntheticData:
    spec: SyntheticDatasetSpec
    train: Split
    eval: Split
    table: WordEmbeddingTable
    prototypes: np.ndarray
    correlation: np.ndarray


def _images(spec, rng, prototypes, classes, count, n_labels):
    H, W, D = spec.height, spec.width, spec.embed_dim
    tokens = rng.normal(0.0, spec.background_noise, size=(count, H, W, D))
    targets = np.zeros((count, n_labels))
    for n in range(count):
        k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        for c in rng.choice(classes, size=k, replace=False):
            ph, pw = rng.integers(spec.patch_min, spec.patch_max + 1, size=2)
            top = int(rng.integers(0, H - ph + 1))
            left = int(rng.integers(0, W - pw + 1))
            patch = prototypes[c] + rng.normal(0.0, spec.prototype_noise, size=(ph, pw, D))
            tokens[n, top:top + ph, left:left + pw] += patch
            targets[n, c] = 1.0
    return tokens.reshape(count, H * W, D), targets


def generate_synthetic_dataset(spec: SyntheticDatasetSpec) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    N, D = spec.num_classes, spec.embed_dim
    if spec.orthogonal_prototypes:
        q, _ = np.linalg.qr(rng.normal(size=(D, N)))
        prototypes = spec.signal * np.sqrt(D) * q.T
    else:
        prototypes = spec.signal * rng.normal(size=(N, D))
    correlation = rng.normal(size=(spec.word_dim, D)) / np.sqrt(D)
    words = prototypes @ correlation.T + spec.word_noise * rng.normal(size=(N, spec.word_dim))
    labels = [f"c{i:0{len(str(N - 1))}d}" for i in range(N)]
    seen = np.ones(N, dtype=bool)
    seen[rng.permutation(N)[:spec.num_unseen]] = False
    table = WordEmbeddingTable(labels, words, seen)
    seen_idx = np.flatnonzero(seen)

    tr_tokens, tr_all = _images(spec, rng, prototypes, seen_idx, spec.num_train, N)
    train = Split(tr_tokens, tr_all[:, seen_idx], [labels[i] for i in seen_idx])
    ev_tokens, ev_targets = _images(spec, rng, prototypes, np.arange(N), spec.num_eval, N)
    return SyntheticData(spec, train, Split(ev_tokens, ev_targets, labels), table, prototypes,
                         correlation)


# ---------------------------------------------------------------------------
# binary cache


def _write_array(buf, arr):
    arr = np.asarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def _read_array(buf):
    (ndim,) = struct.unpack("<I", buf.read(4))
    shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
    n = int(np.prod(shape)) if ndim else 1
    return np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).astype(np.float64)


def dataset_to_bytes(data: SyntheticData) -> bytes:
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<I", CACHE_VERSION))
    buf.write(bytes.fromhex(data.spec.digest()))
    meta = json.dumps({"spec": asdict(data.spec), "labels": data.table.labels,
                       "seen": data.table.seen_mask.tolist(), "train_labels": data.train.labels,
                       "eval_labels": data.eval.labels}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for arr in (data.train.tokens, data.train.targets, data.eval.tokens, data.eval.targets,
                data.table.vectors, data.prototypes, data.correlation):
        _write_array(buf, arr)
    return buf.getvalue()


def dataset_from_bytes(raw: bytes, expected: SyntheticDatasetSpec | None = None) -> SyntheticData:
    buf = io.BytesIO(raw)
    if buf.read(8) != CACHE_MAGIC:
        raise ConfigError("not a dataset cache (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CACHE_VERSION:
        raise ConfigError(f"unsupported dataset cache version {version}")
    digest = buf.read(32).hex()
    (mlen,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(mlen))
    spec = SyntheticDatasetSpec(**meta["spec"])
    if spec.digest() != digest:
        raise ConfigError("dataset cache header hash does not match its spec")
    if expected is not None and expected.digest() != digest:
        raise ConfigError("dataset cache was generated from a different spec")
    tr_x, tr_y, ev_x, ev_y, words, protos, corr = (_read_array(buf) for _ in range(7))
    table = WordEmbeddingTable(meta["labels"], words, meta["seen"])
    return SyntheticData(spec, Split(tr_x, tr_y, meta["train_labels"]),
                         Split(ev_x, ev_y, meta["eval_labels"]), table, protos, corr)


def save_dataset(data: SyntheticData, path):
    Path(path).write_bytes(dataset_to_bytes(data))


def load_dataset(path, expected: SyntheticDatasetSpec | None = None) -> SyntheticData:
    return dataset_from_bytes(Path(path).read_bytes(), expected)
