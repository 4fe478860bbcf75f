"""Fairness gaps and ranking-quality metrics over model predictions.

Gap metrics follow the relaxed definitions: they compare group means of the
raw probabilities, not thresholded decisions.  Thresholded variants are
provided as secondary statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSlice:
    """(prediction, label, attribute) triples for one evaluation split."""

    predictions: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.predictions, dtype=np.float64).ravel()
        y = np.asarray(self.labels, dtype=np.float64).ravel()
        a = np.asarray(self.attributes, dtype=np.float64).ravel()
        if not (len(p) == len(y) == len(a)):
            raise MetricError("predictions, labels, attributes must have equal length")
        if len(p) == 0:
            raise MetricError("empty evaluation slice")
        if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
            raise MetricError("predictions must be finite and in [0, 1]")
        for name, arr in (("labels", y), ("attributes", a)):
            if not np.all(np.isin(arr, (0.0, 1.0))):
                raise MetricError(f"{name} must be binary 0/1")
        object.__setattr__(self, "predictions", p)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "attributes", a)

    def __len__(self):
        return len(self.predictions)


def delta_dp(sl: EvalSlice) -> float:
    """Absolute difference of group-mean predictions."""
    means = []
    for g in (0.0, 1.0):
        sel = sl.attributes == g
        if not np.any(sel):
            raise MetricError(f"attribute group {int(g)} is empty")
        means.append(float(sl.predictions[sel].mean()))
    return abs(means[0] - means[1])


def delta_eo(sl: EvalSlice) -> float:
    """Sum over both label values of the group-mean prediction difference."""
    total = 0.0
    for y in (0.0, 1.0):
        cell_means = []
        for g in (0.0, 1.0):
            sel = (sl.attributes == g) & (sl.labels == y)
            if not np.any(sel):
                raise MetricError(f"cell (attribute={int(g)}, label={int(y)}) is empty")
            cell_means.append(float(sl.predictions[sel].mean()))
        total += abs(cell_means[0] - cell_means[1])
    return total


def delta_dp_thresholded(sl: EvalSlice, threshold: float = 0.5) -> float:
    hard = (sl.predictions >= threshold).astype(np.float64)
    return delta_dp(EvalSlice(hard, sl.labels, sl.attributes))


def delta_eo_thresholded(sl: EvalSlice, threshold: float = 0.5) -> float:
    hard = (sl.predictions >= threshold).astype(np.float64)
    return delta_eo(EvalSlice(hard, sl.labels, sl.attributes))


def average_precision(sl: EvalSlice) -> float:
    """AP = sum_k (R_k - R_{k-1}) P_k over the descending-score ranking.

    Ties are broken by stable input order so the value is deterministic.
    """
    n_pos = int(sl.labels.sum())
    if n_pos == 0:
        raise MetricError("average_precision needs at least one positive label")
    order = np.argsort(-sl.predictions, kind="stable")
    ranked = sl.labels[order]
    hits = np.cumsum(ranked)
    ks = np.arange(1, len(ranked) + 1)
    precision = hits / ks
    return float(precision[ranked == 1.0].sum() / n_pos)


def auc_roc(sl: EvalSlice) -> float:
    """Mann-Whitney AUC; tied prediction pairs count one half."""
    pos = sl.predictions[sl.labels == 1.0]
    neg = sl.predictions[sl.labels == 0.0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("auc_roc needs both classes present")
    # average ranks over the pooled sample
    pooled = np.concatenate([pos, neg])
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(len(pooled))
    sorted_vals = pooled[order]
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = ranks[: len(pos)].sum()
    u = r_pos - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def metric_report(sl: EvalSlice, split: str, seed: int) -> dict:
    """Structured metric document: one entry per metric, plus context."""
    values = {
        "average_precision": average_precision(sl),
        "auc_roc": auc_roc(sl),
        "delta_dp": delta_dp(sl),
        "delta_eo": delta_eo(sl),
        "delta_dp_thresholded": delta_dp_thresholded(sl),
        "delta_eo_thresholded": delta_eo_thresholded(sl),
    }
    return {
        "split": split,
        "seed": seed,
        "n": len(sl),
        "metrics": [{"metric": k, "value": v, "split": split, "seed": seed}
                    for k, v in values.items()],
    }
