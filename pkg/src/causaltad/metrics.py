"""Threshold-free detection metrics.

Higher scores mean "more anomalous"; label ``True`` marks an anomaly.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise MetricError("no scores given")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic: P(anomaly outranks normal), ties worth one half."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc needs both anomalies and normals")
    # Midranks make every tied cross-class pair contribute exactly 1/2.
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision over positives ranked by descending score.

    Tied scores keep their input order (stable sort), so the value is a
    deterministic function of the input sequence.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("pr_auc needs at least one anomaly")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    precision_at_pos = tp[hits] / (np.flatnonzero(hits) + 1.0)
    return float(precision_at_pos.sum() / n_pos)
