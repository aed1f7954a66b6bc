"""Rank-based evaluation: raw/filtered MRR, Hits@n, degree-bucketed MRR.

Ranks use the mean-rank tie rule: rank = 1 + (#strictly greater) +
(#equal others)/2 rounded half up, so a constant scorer cannot collect
rank 1 everywhere. Filtered ranks additionally discard candidates that
form a known-true triple other than the query triple itself. Every test
triple is ranked from both corruption sides and the two pools are merged
for the aggregate metrics.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .graph import KnowledgeGraph

SUBJECT = "subject"
OBJECT = "object"


class FilterSet:
    """All known-true triples (train + validation + test), indexed per query."""

    def __init__(self, triples: Iterable):
        self._objects: dict[tuple[int, int], set[int]] = defaultdict(set)
        self._subjects: dict[tuple[int, int], set[int]] = defaultdict(set)
        self._all: set[tuple[int, int, int]] = set()
        for s, r, o in np.asarray(list(triples), dtype=np.int64).reshape(-1, 3):
            s, r, o = int(s), int(r), int(o)
            self._objects[(s, r)].add(o)
            self._subjects[(r, o)].add(s)
            self._all.add((s, r, o))

    def __contains__(self, triple) -> bool:
        s, r, o = triple
        return (int(s), int(r), int(o)) in self._all

    def __len__(self) -> int:
        return len(self._all)

    def known_candidates(self, triple, side: str) -> np.ndarray:
        """Candidate entities on `side` that complete a known-true triple."""
        s, r, o = (int(x) for x in triple)
        if side == OBJECT:
            known = self._objects.get((s, r), ())
        elif side == SUBJECT:
            known = self._subjects.get((r, o), ())
        else:
            raise ValueError(f"unknown corruption side {side!r}")
        return np.fromiter(known, dtype=np.int64, count=len(known))


def rank_candidates(scores: np.ndarray, true_index: int,
                    exclude: Optional[np.ndarray] = None) -> int:
    """Rank of `true_index` among all candidates under the mean-rank tie rule.

    `exclude` lists candidate indices to discard (the true index is always
    kept even if listed).
    """
    scores = np.asarray(scores)
    true_score = scores[true_index]
    if exclude is not None and len(exclude):
        keep = np.ones(len(scores), dtype=bool)
        keep[exclude] = False
        keep[true_index] = True
        scores = scores[keep]
    greater = int((scores > true_score).sum())
    equal_others = int((scores == true_score).sum()) - 1
    return 1 + greater + (equal_others + 1) // 2


@dataclass(frozen=True)
class RankEntry:
    triple: tuple[int, int, int]
    side: str
    raw_rank: int
    filtered_rank: int

    @property
    def degree_key(self):
        return self.triple


@dataclass
class RankingReport:
    entries: list[RankEntry] = field(default_factory=list)

    def add(self, entry: RankEntry) -> None:
        self.entries.append(entry)

    def raw_ranks(self) -> np.ndarray:
        return np.array([e.raw_rank for e in self.entries], dtype=np.float64)

    def filtered_ranks(self) -> np.ndarray:
        return np.array([e.filtered_rank for e in self.entries], dtype=np.float64)

    def aggregate(self) -> dict:
        if not self.entries:
            raise ValueError("cannot aggregate an empty ranking report")
        raw = self.raw_ranks()
        filt = self.filtered_ranks()
        return {
            "raw_mrr": float((1.0 / raw).mean()),
            "filtered_mrr": float((1.0 / filt).mean()),
            "hits@1": float((filt <= 1).mean()),
            "hits@3": float((filt <= 3).mean()),
            "hits@10": float((filt <= 10).mean()),
            "count": len(self.entries),
        }


def rank_triple(score_fn: Callable, triple, side: str,
                filter_set: Optional[FilterSet], num_entities: int) -> tuple[int, int]:
    """(raw, filtered) rank of one triple on one corruption side.

    score_fn(triples, side) -> (n, num_entities) candidate scores.
    Without a filter set the filtered rank equals the raw rank.
    """
    s, r, o = (int(x) for x in triple)
    scores = np.asarray(score_fn(np.array([[s, r, o]], dtype=np.int64), side))[0]
    if scores.shape != (num_entities,):
        raise ValueError(f"score_fn returned shape {scores.shape}, wanted ({num_entities},)")
    true_index = o if side == OBJECT else s
    raw = rank_candidates(scores, true_index)
    if filter_set is None:
        return raw, raw
    exclude = filter_set.known_candidates((s, r, o), side)
    exclude = exclude[exclude != true_index]
    return raw, rank_candidates(scores, true_index, exclude=exclude)


def evaluate_ranking(score_fn: Callable, triples, num_entities: int,
                     filter_set: Optional[FilterSet] = None,
                     batch_size: int = 512) -> RankingReport:
    """Rank every triple from both corruption sides.

    score_fn(triples_batch, side) -> (n, num_entities) scores; candidates on
    the corrupted side, the other two slots fixed.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    report = RankingReport()
    for side in (SUBJECT, OBJECT):
        true_col = 0 if side == SUBJECT else 2
        for start in range(0, len(triples), batch_size):
            batch = triples[start:start + batch_size]
            scores = np.asarray(score_fn(batch, side))
            for row, (s, r, o) in enumerate(batch):
                triple = (int(s), int(r), int(o))
                true_index = triple[true_col]
                raw = rank_candidates(scores[row], true_index)
                if filter_set is not None:
                    exclude = filter_set.known_candidates(triple, side)
                    exclude = exclude[exclude != true_index]
                    filtered = rank_candidates(scores[row], true_index, exclude=exclude)
                else:
                    filtered = raw
                report.add(RankEntry(triple, side, raw, filtered))
    return report


def degree_bucket_mrr(report: RankingReport, graph: KnowledgeGraph,
                      bucket_edges: Sequence[float]) -> list[dict]:
    """Filtered MRR per average-endpoint-degree bucket.

    bucket_edges are ascending boundaries; bucket k covers
    [edges[k], edges[k+1]) with the final bucket closed on the right.
    Every entry must fall inside the covered range.
    """
    edges = [float(e) for e in bucket_edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bucket edges must be strictly increasing, got {edges}")
    buckets: list[list[float]] = [[] for _ in range(len(edges) - 1)]
    for entry in report.entries:
        degree = graph.degree_of_triple(entry.triple)
        if degree < edges[0] or degree > edges[-1]:
            raise ValueError(f"degree {degree} outside bucket range [{edges[0]}, {edges[-1]}]")
        k = int(np.searchsorted(edges, degree, side="right")) - 1
        k = min(k, len(buckets) - 1)  # right edge of the last bucket is inclusive
        buckets[k].append(1.0 / entry.filtered_rank)
    rows = []
    for k, recips in enumerate(buckets):
        rows.append({
            "low": edges[k],
            "high": edges[k + 1],
            "center": 0.5 * (edges[k] + edges[k + 1]),
            "count": len(recips),
            "mrr": float(np.mean(recips)) if recips else None,
        })
    return rows
