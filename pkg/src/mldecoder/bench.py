"""Analytic cost model and wall-clock sweep for the three heads.

Costs are multiply-accumulates (MACs) per image, counting matrix products and
the group fully-connected contraction; elementwise work (softmax, layer norm,
ReLU, residual adds) is not counted. The same convention is used by the
instrumented counter in :mod:`mldecoder.tensor`, so the two must agree exactly.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .heads import GapHead, HeadConfig, MLDecoderHead, TransformerDecoderHead
from .tensor import Tensor, count_macs

HEAD_KINDS = ("gap", "transformer", "mldecoder")
CSV_COLUMNS = ("head", "N", "K", "D", "analytic_macs", "measured_ms", "alloc_mb")


@dataclass(frozen=True)
class HeadCostModel:
    kind: str
    N: int
    K: int | None = None
    D: int = 32
    h: int = 2
    ff_hidden: int | None = None
    H: int = 7
    W: int = 7
    D_in: int | None = None

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.kind == "transformer" and self.K not in (None, self.N):
            raise ConfigError("transformer decoder uses K == N")
        if self.kind == "mldecoder" and not (self.K and 1 <= self.K <= self.N):
            raise ConfigError("ML-Decoder needs 1 <= K <= N")

    @property
    def queries(self):
        return {"gap": None, "transformer": self.N, "mldecoder": self.K}[self.kind]

    @property
    def ff(self):
        return 4 * self.D if self.ff_hidden is None else self.ff_hidden

    @property
    def d_in(self):
        return self.D if self.D_in is None else self.D_in

    def build(self, seed=0):
        if self.kind == "gap":
            return GapHead(self.N, self.d_in, seed=seed)
        cfg = HeadConfig(num_classes=self.N, model_dim=self.D, num_queries=self.queries,
                         num_heads=self.h, ff_hidden_dim=self.ff, embed_dim=self.d_in,
                         group_seed=seed)
        if self.kind == "transformer":
            return TransformerDecoderHead(cfg, query_kind="fixed_random", seed=seed)
        return MLDecoderHead(cfg, seed=seed)


@dataclass
class CostLedger:
    terms: dict = field(default_factory=dict)

    @property
    def total(self):
        return sum(self.terms.values())


def head_flops(m: HeadCostModel) -> CostLedger:
    """Closed-form MACs per image, itemized by stage."""
    HW, D, N, F, Din = m.H * m.W, m.D, m.N, m.ff, m.d_in
    if m.kind == "gap":
        return CostLedger({"spatial_mean": HW * Din, "fc": N * Din})
    t = {"adapter": HW * Din * D if Din != D else 0}
    q = m.queries
    if m.kind == "transformer":
        t["self_attn_proj"] = 4 * N * D * D
        t["self_attn_scores"] = 2 * N * N * D
    t["cross_attn_proj"] = 2 * q * D * D + 2 * HW * D * D
    t["cross_attn_scores"] = 2 * q * HW * D
    t["ff"] = 2 * q * D * F
    t["token_pool" if m.kind == "transformer" else "group_fc"] = N * D
    return CostLedger(t)


def _tokens(m: HeadCostModel, batch, seed):
    shape = (m.H * m.W, m.d_in) if batch is None else (batch, m.H * m.W, m.d_in)
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def instrumented_flops(m: HeadCostModel, seed=0, head=None):
    """MACs actually executed by one unbatched forward pass."""
    head = m.build(seed) if head is None else head
    with count_macs() as counter:
        head(_tokens(m, None, seed))
    return counter.macs


@dataclass
class BenchRow:
    head: str
    N: int
    K: int | None
    D: int
    analytic_macs: int
    measured_ms: float | None = None
    alloc_mb: float | None = None
    instrumented_macs: int | None = None

    def csv_fields(self):
        na = lambda v: "NA" if v is None else repr(v)  # noqa: E731
        return [self.head, str(self.N), na(self.K), str(self.D), str(self.analytic_macs),
                na(self.measured_ms), na(self.alloc_mb)]

    @classmethod
    def from_csv_fields(cls, row):
        head, N, K, D, macs, ms, mb = row
        opt = lambda v, f: None if v == "NA" else f(v)  # noqa: E731
        return cls(head, int(N), opt(K, int), int(D), int(macs), opt(ms, float), opt(mb, float))


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()


def rows_from_csv(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ConfigError(f"unexpected bench CSV header {header}")
    return [BenchRow.from_csv_fields(r) for r in reader if r]


def rows_to_markdown(rows):
    names = {"gap": "GAP", "transformer": "Transformer-Decoder", "mldecoder": "ML-Decoder"}
    lines = ["| Classification Head | Number of Classes | Number of Queries | "
             "Head MACs [M] (multiply-accumulates) | Forward [ms] | Alloc [MB] |",
             "|---|---|---|---|---|---|"]
    for r in rows:
        fmt = lambda v, spec: "NA" if v is None else format(v, spec)  # noqa: E731
        lines.append(f"| {names[r.head]} | {r.N} | {'NA' if r.K is None else r.K} | "
                     f"{r.analytic_macs / 1e6:.3f} | {fmt(r.measured_ms, '.2f')} | "
                     f"{fmt(r.alloc_mb, '.2f')} |")
    return "\n".join(lines) + "\n"


def default_sweep(D=32, h=2, H=7, W=7, K=100, sizes=(100, 1000, 5000)):
    configs = []
    for kind in HEAD_KINDS:
        for N in sizes:
            k = {"gap": None, "transformer": N, "mldecoder": min(K, N)}[kind]
            configs.append(HeadCostModel(kind, N, k, D=D, h=h, H=H, W=W))
    return configs


def run_scalability_sweep(configs=None, repeats=5, budget_s=5.0, batch=16, analytic_only=False,
                          seed=0):
    """Analytic and instrumented MACs plus median forward time per config.

    A config whose warm-up forward exceeds ``budget_s`` gets NA timings.
    """
    if repeats < 3:
        raise ConfigError("repeats must be >= 3")
    configs = default_sweep() if configs is None else configs
    rows = []
    for m in configs:
        row = BenchRow(m.kind, m.N, m.queries, m.D, head_flops(m).total)
        if not analytic_only:
            head = m.build(seed)
            row.instrumented_macs = instrumented_flops(m, seed, head)
            tokens = _tokens(m, batch, seed)
            t0 = time.perf_counter()
            with count_macs() as counter:
                head(tokens)
            warm = time.perf_counter() - t0
            if warm <= budget_s:
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    head(tokens)
                    times.append(time.perf_counter() - t0)
                row.measured_ms = statistics.median(times) * 1e3
                row.alloc_mb = counter.alloc_bytes / 2**20
        rows.append(row)
    return rows
