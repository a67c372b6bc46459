"""Top-k exact-match accuracy and attribute-relevance NDCG@k."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import MISSING
from .errors import ContractError
from .retrieval import RankedList


def top_k_accuracy(results: Sequence[RankedList], truth: Mapping[str, set], k: int) -> float:
    """Fraction of queries with at least one true match among the first ``k`` entries."""
    if not results:
        return 0.0
    hits = 0
    for r in results:
        if r.query_id not in truth:
            raise ContractError(f"query {r.query_id!r} has no ground-truth entry")
        matches = truth[r.query_id]
        if any(g in matches for g in r.ids[:k]):
            hits += 1
    return hits / len(results)


def relevance(query_attrs: Sequence[int], result_attrs: Sequence[int]) -> float:
    """Matched attributes over the query's labelled attributes."""
    q = np.asarray(query_attrs, dtype=np.int64)
    r = np.asarray(result_attrs, dtype=np.int64)
    labelled = q != MISSING
    if not labelled.any():
        raise ContractError("relevance is undefined for a query with every attribute missing")
    return float(np.sum(labelled & (q == r)) / np.sum(labelled))


def _relevance_table(q: np.ndarray, table: np.ndarray) -> np.ndarray:
    labelled = q != MISSING
    if not labelled.any():
        raise ContractError("relevance is undefined for a query with every attribute missing")
    return ((table == q) & labelled).sum(axis=1) / labelled.sum()


def _dcg(rels: np.ndarray) -> float:
    if rels.size == 0:
        return 0.0
    discounts = np.log2(np.arange(2, rels.size + 2))
    return float(np.sum((np.power(2.0, rels) - 1.0) / discounts))


def ndcg_at_k(results: Sequence[RankedList], query_attrs: Mapping[str, Sequence[int]],
              gallery_attrs: Mapping[str, Sequence[int]], k: int) -> float:
    """Mean NDCG@k with log2 discounts; the ideal DCG uses the whole gallery."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if not results:
        return 0.0
    ids = list(gallery_attrs)
    table = np.stack([np.asarray(gallery_attrs[g], dtype=np.int64) for g in ids])
    row = {g: i for i, g in enumerate(ids)}
    scores = []
    for r in results:
        if r.query_id not in query_attrs:
            raise ContractError(f"query {r.query_id!r} has no attribute record")
        rel = _relevance_table(np.asarray(query_attrs[r.query_id], dtype=np.int64), table)
        ideal = _dcg(np.sort(rel)[::-1][:k])
        if ideal == 0.0:
            scores.append(1.0)
            continue
        got = rel[[row[g] for g in r.ids[:k]]]
        scores.append(_dcg(got) / ideal)
    return float(np.mean(scores))


@dataclass
class EvalReport:
    top_k_curve: dict[int, float]
    ndcg_at_k: dict[int, float]
    config: dict = field(default_factory=dict)
    gallery_size: int = 0
    query_count: int = 0

    def to_dict(self) -> dict:
        return {
            "top_k_curve": {str(k): v for k, v in sorted(self.top_k_curve.items())},
            "ndcg_at_k": {str(k): v for k, v in sorted(self.ndcg_at_k.items())},
            "config": self.config,
            "gallery_size": self.gallery_size,
            "query_count": self.query_count,
        }

    def write(self, out_dir, stem: str = "report") -> None:
        out = Path(out_dir)
        with open(out / f"{stem}.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        for name, curve, col in (("topk", self.top_k_curve, "accuracy"), ("ndcg", self.ndcg_at_k, "ndcg")):
            with open(out / f"{stem}_{name}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["k", col])
                for k, v in sorted(curve.items()):
                    w.writerow([k, repr(v)])


def evaluate_results(results: Sequence[RankedList], truth, query_attrs, gallery_attrs,
                     k_values: Sequence[int], config: dict | None = None,
                     gallery_size: int | None = None) -> EvalReport:
    return EvalReport(
        top_k_curve={k: top_k_accuracy(results, truth, k) for k in k_values},
        ndcg_at_k={k: ndcg_at_k(results, query_attrs, gallery_attrs, k) for k in k_values},
        config=dict(config or {}),
        gallery_size=len(gallery_attrs) if gallery_size is None else gallery_size,
        query_count=len(results),
    )
