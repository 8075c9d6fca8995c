"""Ranking metrics for multi-label evaluation: mAP and F1 at top-K."""
from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, DimensionError, EmptyMetricError


@dataclass
class MetricsReport:
    mAP: float
    per_class_ap: list
    f1_at_k: dict = field(default_factory=dict)
    mode: str = "plain"
    labels: list | None = None

    def to_csv(self):
        """``class,ap`` rows; classes without positives get an empty ap."""
        buf = io.StringIO()
        buf.write("class,ap\n")
        names = self.labels or [str(i) for i in range(len(self.per_class_ap))]
        for name, ap in zip(names, self.per_class_ap):
            buf.write(f"{name},{'' if ap is None else repr(float(ap))}\n")
        return buf.getvalue()

    def summary_line(self):
        f3 = self.f1_at_k.get(3, float("nan"))
        f5 = self.f1_at_k.get(5, float("nan"))
        return f"{self.mAP!r},{f3!r},{f5!r},{self.mode}"


SUMMARY_HEADER = "mAP,F1@3,F1@5,mode"


def _check(scores, targets):
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets)
    if s.shape != t.shape or s.ndim != 2:
        raise DimensionError(f"scores {s.shape} and targets {t.shape} must be matching 2-D arrays")
    return s, t > 0


def average_precision(scores, labels):
    """Mean of precision at the rank of each positive; ties keep input order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(labels)[order] > 0
    if not hits.any():
        return None
    cum = np.cumsum(hits)
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(cum[hits] / ranks))


def eval_map(scores, targets, mode="plain", labels=None, ks=(3, 5)) -> MetricsReport:
    """Per-class AP over images, averaged over classes that have a positive."""
    s, t = _check(scores, targets)
    aps = [average_precision(s[:, c], t[:, c]) for c in range(s.shape[1])]
    valid = [a for a in aps if a is not None]
    if not valid:
        raise EmptyMetricError("no positive labels: mAP undefined")
    report = MetricsReport(float(np.mean(valid)), aps, {}, mode, labels)
    for k in ks:
        report.f1_at_k[k] = eval_f1_at_k(s, t, k)
    return report


def eval_f1_at_k(scores, targets, k=3):
    """Micro-averaged F1 of the per-image top-``k`` predictions."""
    if k < 1:
        raise ContractError("K must be >= 1")
    s, t = _check(scores, targets)
    n_img, n_lab = s.shape
    if k > n_lab:
        warnings.warn(f"F1@{k} clamped to {n_lab} labels", RuntimeWarning, stacklevel=2)
        k = n_lab
    top = np.argsort(-s, axis=1, kind="stable")[:, :k]
    tp = int(np.take_along_axis(t, top, axis=1).sum())
    n_pos = int(t.sum())
    precision = tp / (n_img * k) if n_img else 0.0
    recall = tp / n_pos if n_pos else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
