"""Per-request ranking metrics: global AUC, NDCG@K and MAP.

Tie conventions (documented because they change numbers):

* AUC counts a positive/negative pair only when the positive scores strictly
  higher; tied pairs contribute zero.
* Rankings sort by score descending and break ties by original position,
  earliest first.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (e.g. AUC with one class)."""


@dataclass
class RequestGroup:
    request_id: int
    scores: list
    labels: list

    def __post_init__(self):
        if len(self.scores) != len(self.labels):
            raise ValueError(f"request {self.request_id}: {len(self.scores)} scores but {len(self.labels)} labels")

    @property
    def n_positive(self) -> int:
        return int(sum(1 for y in self.labels if y))


def auc_global(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ordered strictly correctly.

    Sort-based, O(n log n): for every positive count the negatives with a
    strictly smaller score via binary search.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    below = np.searchsorted(neg, pos, side="left")
    return float(below.sum()) / (pos.size * neg.size)


def _ranked_labels(group: RequestGroup) -> np.ndarray:
    order = np.argsort(-np.asarray(group.scores, dtype=np.float64), kind="stable")
    return np.asarray(group.labels, dtype=np.float64)[order]


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg_at_k(group: RequestGroup, k: Optional[int] = None) -> float:
    """Binary-gain NDCG over the top ``k`` (whole list when ``k`` is None)."""
    rel = _ranked_labels(group)
    n_pos = int(rel.sum())
    if n_pos == 0:
        raise UndefinedMetricError(f"request {group.request_id} has no positives")
    k = len(rel) if k is None else min(int(k), len(rel))
    disc = _discounts(k)
    dcg = float(((2.0 ** rel[:k] - 1.0) * disc).sum())
    idcg = float(disc[: min(n_pos, k)].sum())
    return dcg / idcg


def average_precision(group: RequestGroup) -> float:
    rel = _ranked_labels(group)
    n_pos = rel.sum()
    if n_pos == 0:
        raise UndefinedMetricError(f"request {group.request_id} has no positives")
    precision = np.cumsum(rel) / np.arange(1, len(rel) + 1)
    return float((precision * rel).sum() / n_pos)


def group_by_request(request_ids, scores, labels) -> list[RequestGroup]:
    """Collect predictions into groups, ordered by first appearance."""
    groups: "OrderedDict[int, RequestGroup]" = OrderedDict()
    for rid, s, y in zip(request_ids, scores, labels):
        rid = int(rid)
        if rid not in groups:
            groups[rid] = RequestGroup(rid, [], [])
        groups[rid].scores.append(float(s))
        groups[rid].labels.append(int(y))
    return list(groups.values())


def mean_ndcg(groups: Sequence[RequestGroup], k: Optional[int] = None) -> tuple[float, int]:
    """Mean NDCG over groups with a positive; returns ``(mean, n_skipped)``."""
    vals = [ndcg_at_k(g, k) for g in groups if g.n_positive]
    return (float(np.mean(vals)) if vals else math.nan), len(groups) - len(vals)


def mean_average_precision(groups: Sequence[RequestGroup]) -> tuple[float, int]:
    vals = [average_precision(g) for g in groups if g.n_positive]
    return (float(np.mean(vals)) if vals else math.nan), len(groups) - len(vals)


def evaluate(request_ids, scores, labels, k: Optional[int] = None) -> dict:
    """Metrics report as a plain dict (JSON-serializable)."""
    scores, labels = list(scores), list(labels)
    groups = group_by_request(request_ids, scores, labels)
    ndcg, skipped = mean_ndcg(groups, k)
    mean_ap, _ = mean_average_precision(groups)
    try:
        auc = auc_global(scores, labels)
    except UndefinedMetricError:
        auc = math.nan
    return {
        "auc": auc,
        "ndcg": ndcg,
        "map": mean_ap,
        "k": k,
        "n_instances": len(labels),
        "n_groups": len(groups),
        "n_groups_skipped": skipped,
    }


def format_report(report: dict) -> str:
    k = "full" if report.get("k") is None else report["k"]
    return (
        f"AUC      {report['auc']:.6f}\n"
        f"NDCG@{k:<4}{report['ndcg']:.6f}\n"
        f"MAP      {report['map']:.6f}\n"
        f"groups   {report['n_groups']} ({report['n_groups_skipped']} without positives skipped)\n"
    )


# -- predictions file -------------------------------------------------------------


def write_predictions(path, request_ids, scores, labels) -> None:
    with open(path, "w") as fh:
        for rid, s, y in zip(request_ids, scores, labels):
            fh.write(json.dumps({"request_id": int(rid), "score": float(s), "label": int(y)}) + "\n")


def read_predictions(path) -> tuple[list, list, list]:
    rids, scores, labels = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rids.append(int(rec["request_id"]))
                scores.append(float(rec["score"]))
                labels.append(int(rec["label"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad prediction record ({exc})") from exc
    return rids, scores, labels


def evaluate_file(path, k: Optional[int] = None) -> dict:
    return evaluate(*read_predictions(path), k=k)

