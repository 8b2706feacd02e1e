"""Retrieval quality summaries: recall@k, patch-level precision/recall.

Ground truth for image-level recall is a set of positive db images per
query (typically images sharing at least one co-visible 3D point).
Patch-level metrics compare the matched (p, q) pairs reported for each
query's top-ranked image against the labeled positives for that pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class RetrievalMetrics:
    recall_at_k: dict
    mean_patch_precision: float | None = None
    mean_patch_recall: float | None = None
    margins: dict = field(default_factory=dict)

    def __post_init__(self):
        prev_k, prev_v = 0, -1.0
        for k in sorted(self.recall_at_k):
            v = self.recall_at_k[k]
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"recall@{k} outside [0,1]")
            if k > prev_k and v < prev_v:
                raise ValidationError("recall must be non-decreasing in k")
            prev_k, prev_v = k, v
        for name in ("mean_patch_precision", "mean_patch_recall"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} outside [0,1]")

    def to_json_obj(self) -> dict:
        return {
            "recall_at_k": {str(k): v for k, v in sorted(self.recall_at_k.items())},
            "mean_patch_precision": self.mean_patch_precision,
            "mean_patch_recall": self.mean_patch_recall,
            "margins": dict(sorted(self.margins.items())),
        }


def _drop_self(rows: list) -> list:
    out = []
    for row in rows:
        ranked = [r for r in row["ranked"] if r["db"] != row["query"]]
        out.append({"query": row["query"], "ranked": ranked})
    return out


def compute_metrics(
    rows: list,
    gt_positives: dict,
    ks=(1, 5, 10),
    match_positives: dict | None = None,
    exclude_self: bool = False,
) -> RetrievalMetrics:
    """Score retrieval result rows against ground truth.

    rows follow the retrieval JSON-lines shape: {"query", "ranked":
    [{"db", "score", "matches"}]}. gt_positives maps query id to the set
    of relevant db ids; queries with no relevant image are left out of
    the recall denominator. match_positives optionally maps (query, db)
    to the set of true positive patch pairs, enabling patch metrics on
    each query's top-ranked image. exclude_self removes each query from
    its own ranking and ground truth first.
    """
    if exclude_self:
        rows = _drop_self(rows)
        gt_positives = {
            q: {d for d in dbs if d != q} for q, dbs in gt_positives.items()
        }
    evaluated = [r for r in rows if gt_positives.get(r["query"], set())]
    if not evaluated:
        raise ValidationError("no query has a ground-truth positive image")
    recall = {}
    for k in ks:
        if k < 1:
            raise ValidationError("recall cutoffs must be positive")
        hit = sum(
            any(r["db"] in gt_positives[row["query"]] for r in row["ranked"][:k])
            for row in evaluated
        )
        recall[int(k)] = hit / len(evaluated)

    margins = {}
    for row in rows:
        ranked = row["ranked"]
        if len(ranked) >= 2:
            margins[row["query"]] = ranked[0]["score"] - ranked[1]["score"]
        elif ranked:
            margins[row["query"]] = ranked[0]["score"]

    precision = recall_p = None
    if match_positives is not None:
        precisions, recalls = [], []
        for row in rows:
            if not row["ranked"]:
                continue
            top = row["ranked"][0]
            key = (row["query"], top["db"])
            if key not in match_positives:
                continue
            truth = {(int(p), int(q)) for p, q in match_positives[key]}
            pred = {(int(p), int(q)) for p, q, _ in top["matches"]}
            if pred:
                precisions.append(len(pred & truth) / len(pred))
            if truth:
                recalls.append(len(pred & truth) / len(truth))
        precision = float(np.mean(precisions)) if precisions else None
        recall_p = float(np.mean(recalls)) if recalls else None
    return RetrievalMetrics(recall, precision, recall_p, margins)
