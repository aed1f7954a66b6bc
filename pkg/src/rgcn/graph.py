"""In-memory store for directed labeled multigraphs.

A knowledge graph holds (subject, relation, object) triples over a dense,
contiguous entity vocabulary. On construction the relation vocabulary is
augmented: every canonical relation gets an inverse twin (so messages can
flow against edge direction) and a single shared self-loop relation is
appended. Adjacency is materialized per augmented relation as compressed
sparse rows keyed by the *target* node, which is the gather direction used
by layer propagation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

CANONICAL = "canonical"
INVERSE = "inverse"
SELF_LOOP = "self-loop"

PER_RELATION = "per-relation"
ACROSS_RELATIONS = "across-relations"


class GraphError(ValueError):
    """Structural problem in graph input (out-of-range ids, bad shapes)."""

    def __init__(self, message: str, triple=None):
        super().__init__(message)
        self.triple = triple


@dataclass(frozen=True)
class Relation:
    """One member of the augmented relation vocabulary."""

    index: int
    name: str
    kind: str  # CANONICAL | INVERSE | SELF_LOOP
    base: Optional[int] = None  # canonical partner, set on inverse relations

    def __post_init__(self):
        if self.kind not in (CANONICAL, INVERSE, SELF_LOOP):
            raise GraphError(f"unknown relation kind {self.kind!r}")


class KnowledgeGraph:
    """Immutable multigraph with per-augmented-relation adjacency.

    Augmented relation ids: 0..R-1 canonical, R..2R-1 inverse (inverse of r
    is r+R), and 2R the self-loop. Parallel edges are preserved; each
    duplicate contributes its own adjacency entry.
    """

    def __init__(self, triples, num_nodes: int, num_relations: int,
                 entity_names: Optional[Sequence[str]] = None,
                 relation_names: Optional[Sequence[str]] = None):
        triples = np.asarray(list(triples) if not isinstance(triples, np.ndarray) else triples,
                             dtype=np.int64)
        if triples.size == 0:
            triples = triples.reshape(0, 3)
        if triples.ndim != 2 or triples.shape[1] != 3:
            raise GraphError(f"triples must be (n, 3), got shape {triples.shape}")
        self.num_nodes = int(num_nodes)
        self.num_canonical = int(num_relations)
        self.triples = triples

        bad = (
            (triples[:, 0] < 0) | (triples[:, 0] >= self.num_nodes)
            | (triples[:, 2] < 0) | (triples[:, 2] >= self.num_nodes)
            | (triples[:, 1] < 0) | (triples[:, 1] >= self.num_canonical)
        )
        if bad.any():
            first = triples[int(np.flatnonzero(bad)[0])]
            raise GraphError(
                f"triple {tuple(int(x) for x in first)} out of range for "
                f"{self.num_nodes} nodes / {self.num_canonical} relations",
                triple=tuple(int(x) for x in first))

        if relation_names is None:
            relation_names = [f"r{r}" for r in range(self.num_canonical)]
        if len(relation_names) != self.num_canonical:
            raise GraphError("relation_names length mismatch")
        self.entity_names = list(entity_names) if entity_names is not None else None
        if self.entity_names is not None and len(self.entity_names) != self.num_nodes:
            raise GraphError("entity_names length mismatch")

        rels = [Relation(r, str(relation_names[r]), CANONICAL) for r in range(self.num_canonical)]
        rels += [Relation(self.num_canonical + r, f"{relation_names[r]}^{{-1}}", INVERSE, base=r)
                 for r in range(self.num_canonical)]
        rels.append(Relation(2 * self.num_canonical, "<self-loop>", SELF_LOOP))
        self.relations = rels

        # CSR adjacency keyed by target node: _indptr[r] has V+1 entries,
        # _sources[r] lists source nodes of edges arriving at each target.
        self._indptr = []
        self._sources = []
        s, r, o = triples[:, 0], triples[:, 1], triples[:, 2]
        for rel in range(self.num_canonical):
            mask = r == rel
            self._indptr.append(None)
            self._sources.append(None)
            self._fill_adjacency(rel, dst=o[mask], src=s[mask])
        for rel in range(self.num_canonical):
            mask = r == rel
            self._indptr.append(None)
            self._sources.append(None)
            self._fill_adjacency(self.num_canonical + rel, dst=s[mask], src=o[mask])
        # self-loop: identity pattern
        self._indptr.append(np.arange(self.num_nodes + 1, dtype=np.int64))
        self._sources.append(np.arange(self.num_nodes, dtype=np.int64))

        # total degree (canonical in + out), self-loops excluded
        deg = np.bincount(s, minlength=self.num_nodes) + np.bincount(o, minlength=self.num_nodes)
        self.node_degrees = deg.astype(np.int64)

    def _fill_adjacency(self, rel: int, dst: np.ndarray, src: np.ndarray) -> None:
        order = np.argsort(dst, kind="stable")
        dst, src = dst[order], src[order]
        indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=self.num_nodes), out=indptr[1:])
        self._indptr[rel] = indptr
        self._sources[rel] = src.astype(np.int64)

    # -- accessors ---------------------------------------------------------

    @property
    def num_augmented(self) -> int:
        return 2 * self.num_canonical + 1

    @property
    def self_loop_id(self) -> int:
        return 2 * self.num_canonical

    def inverse_of(self, rel: int) -> int:
        if not 0 <= rel < self.num_canonical:
            raise GraphError(f"no inverse for relation id {rel}")
        return self.num_canonical + rel

    def sources_of(self, node: int, rel: int) -> np.ndarray:
        """Source neighbors of `node` under augmented relation `rel`."""
        lo, hi = self._indptr[rel][node], self._indptr[rel][node + 1]
        return self._sources[rel][lo:hi]

    def edge_arrays(self, rel: int) -> tuple[np.ndarray, np.ndarray]:
        """(dst, src) arrays over all edges of augmented relation `rel`."""
        indptr = self._indptr[rel]
        dst = np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(indptr))
        return dst, self._sources[rel]

    def neighbor_counts(self, rel: int) -> np.ndarray:
        """|N_i^rel| for every node i (parallel edges counted)."""
        return np.diff(self._indptr[rel]).astype(np.int64)

    def num_edges(self, rel: int) -> int:
        return int(self._indptr[rel][-1])

    def degree_of_triple(self, triple) -> float:
        """Average of subject/object total degree, self-loops excluded."""
        s, _, o = triple
        if not (0 <= s < self.num_nodes and 0 <= o < self.num_nodes):
            raise GraphError(f"triple {tuple(triple)} out of range for {self.num_nodes} nodes",
                             triple=tuple(triple))
        return (float(self.node_degrees[s]) + float(self.node_degrees[o])) / 2.0

    def __repr__(self):
        return (f"KnowledgeGraph(nodes={self.num_nodes}, relations={self.num_canonical}, "
                f"triples={len(self.triples)})")


def build_graph(triples, num_nodes: int, num_relations: int,
                entity_names=None, relation_names=None) -> KnowledgeGraph:
    """Construct a KnowledgeGraph with augmented adjacency from raw triples."""
    return KnowledgeGraph(triples, num_nodes, num_relations,
                          entity_names=entity_names, relation_names=relation_names)


class NormalizationScheme:
    """Message normalization constants c_{i,r}, computed on the full graph.

    per-relation mode: c_{i,r} = |N_i^r| whenever that count is positive
    (absent otherwise; a node with no incoming r-edges has no constant).
    across-relations mode: c_{i,r} = c_i = sum over the augmented relation
    vocabulary of |N_i^r|, with the self-loop counting as one neighbor, so
    c_i >= 1 for every node.
    """

    def __init__(self, graph: KnowledgeGraph, mode: str = PER_RELATION):
        if mode not in (PER_RELATION, ACROSS_RELATIONS):
            raise GraphError(f"unknown normalization mode {mode!r}")
        self.mode = mode
        self.graph = graph
        if mode == ACROSS_RELATIONS:
            total = np.ones(graph.num_nodes, dtype=np.float64)  # self-loop neighbor
            for rel in range(2 * graph.num_canonical):
                total += graph.neighbor_counts(rel)
            self._across = total

    def constant(self, node: int, rel: int) -> Optional[float]:
        """c_{node,rel}, or None where no constant is stored."""
        if self.mode == ACROSS_RELATIONS:
            return float(self._across[node])
        if rel == self.graph.self_loop_id:
            return 1.0
        count = self.graph._indptr[rel][node + 1] - self.graph._indptr[rel][node]
        return float(count) if count > 0 else None

    def edge_weights(self, rel: int) -> np.ndarray:
        """1/c_{i,rel} for every stored edge of `rel`, aligned with edge_arrays."""
        dst, _ = self.graph.edge_arrays(rel)
        if self.mode == ACROSS_RELATIONS:
            return 1.0 / self._across[dst]
        counts = self.graph.neighbor_counts(rel)
        return 1.0 / counts[dst].astype(np.float64)


def normalization(graph: KnowledgeGraph, mode: str = PER_RELATION) -> NormalizationScheme:
    return NormalizationScheme(graph, mode)
