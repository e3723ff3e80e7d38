"""Classification and ranking metrics.

Ranking conventions: AUC gives ties half credit; sorting for MRR/nDCG is by
score descending with ties broken by original position. MRR averages the
reciprocal ranks of all clicked items. Sums use math.fsum so the result does
not depend on summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class RankedImpression:
    scores: list
    labels: list

    def __post_init__(self):
        if len(self.scores) != len(self.labels):
            raise ValueError(f"{len(self.scores)} scores vs {len(self.labels)} labels")
        if not len(self.scores):
            raise ValueError("empty impression")


def accuracy(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {labels.shape}")
    return float((preds == labels).mean())


def macro_f1(preds, labels, num_classes):
    """Unweighted mean of per-class F1; a class without true positives scores 0."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    total = 0.0
    for c in range(num_classes):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        if tp == 0:
            continue
        p, r = tp / (tp + fp), tp / (tp + fn)
        total += 2 * p * r / (p + r)
    return total / num_classes


def _order(scores):
    # stable descending sort: ties keep original order
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def auc(imp):
    """Mann-Whitney AUC, or None when the impression lacks a positive or a negative."""
    s = np.asarray(imp.scores, dtype=np.float64)
    y = np.asarray(imp.labels)
    pos, neg = s[y == 1], s[y == 0]
    if not len(pos) or not len(neg):
        return None
    # rank-sum with average ranks for ties
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="stable")
    ranks = np.empty(len(allv))
    sv = allv[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    r_pos = ranks[:len(pos)].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg)))


def mrr(imp):
    y = np.asarray(imp.labels)[_order(imp.scores)]
    hits = np.flatnonzero(y == 1)
    if not len(hits):
        return None
    return float(math.fsum(1.0 / (h + 1) for h in hits) / len(hits))


def _dcg(labels_sorted, k):
    top = labels_sorted[:k]
    return math.fsum((2.0 ** l - 1.0) / math.log2(r + 2) for r, l in enumerate(top))


def ndcg_at_k(imp, k):
    y = np.asarray(imp.labels, dtype=np.float64)
    ideal = _dcg(np.sort(y)[::-1], k)
    if ideal == 0:
        return None
    return _dcg(y[_order(imp.scores)], k) / ideal


def ranking_report(impressions):
    """Dataset-level AUC/MRR/nDCG@5/nDCG@10 as unweighted means over valid impressions.

    Returns a list of JSON-ready records ``{metric, value, n_instances, n_excluded}``.
    """
    fns = {
        "auc": auc,
        "mrr": mrr,
        "ndcg@5": lambda imp: ndcg_at_k(imp, 5),
        "ndcg@10": lambda imp: ndcg_at_k(imp, 10),
    }
    records = []
    for name, fn in fns.items():
        vals = [fn(imp) for imp in impressions]
        good = [v for v in vals if v is not None]
        records.append({
            "metric": name,
            "value": float(np.mean(good)) if good else None,
            "n_instances": len(good),
            "n_excluded": len(vals) - len(good),
        })
    return records


def classification_report(preds, labels, num_classes):
    n = len(labels)
    return [
        {"metric": "accuracy", "value": accuracy(preds, labels), "n_instances": n, "n_excluded": 0},
        {"metric": "macro_f1", "value": macro_f1(preds, labels, num_classes), "n_instances": n,
         "n_excluded": 0},
    ]
