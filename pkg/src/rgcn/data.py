"""Dataset ingestion: triple TSVs, N-Triples graphs, benchmark label splits.

Triple TSV loaders serve the link-prediction benchmarks (one
subject<TAB>relation<TAB>object statement per line, CRLF tolerated,
transparently gzipped). RDF classification datasets load from N-Triples
only — convert other serializations externally (scripts/prepare_data.py).
Every term keeps its exact N-Triples token as its name, so literals
deduplicate by exact lexical form and blank nodes stay distinct per label.

Entity and relation ids are assigned in first-seen order, which makes
loading deterministic and reloads id-stable.
"""

from __future__ import annotations

import gzip
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .classify import LabelSet
from .graph import KnowledgeGraph, build_graph

REMOVE_RELATION = "remove-relation-entirely"
REMOVE_TARGET = "remove-target-triples-only"


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""

    def __init__(self, message: str, file: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if file is not None:
            location = f"{file}:{line}: " if line is not None else f"{file}: "
        super().__init__(location + message)
        self.file = file
        self.line = line


def _open_text(path):
    path = str(path)
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


@dataclass
class DatasetBundle:
    """Loaded triples plus vocabulary maps and optional benchmark labels."""

    entity_names: list[str]
    relation_names: list[str]
    splits: dict[str, np.ndarray]
    task: str  # "linkpred" | "classify"
    labels: Optional["BenchmarkLabels"] = None
    removed_triples: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.entity_ids = {name: i for i, name in enumerate(self.entity_names)}
        self.relation_ids = {name: i for i, name in enumerate(self.relation_names)}
        if len(self.entity_ids) != len(self.entity_names):
            raise DataError("entity names are not unique")
        if len(self.relation_ids) != len(self.relation_names):
            raise DataError("relation names are not unique")

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def build_graph(self, split: str = "train") -> KnowledgeGraph:
        return build_graph(self.splits[split], self.num_entities, self.num_relations,
                           entity_names=self.entity_names, relation_names=self.relation_names)

    def stats(self) -> dict:
        out = {"entities": self.num_entities, "relations": self.num_relations}
        if self.task == "linkpred":
            for name, triples in self.splits.items():
                out[f"{name}_edges"] = len(triples)
        else:
            out["edges"] = sum(len(t) for t in self.splits.values())
            if self.labels is not None:
                out["labeled"] = len(self.labels.train) + len(self.labels.test)
                out["classes"] = len(self.labels.class_names)
        return out

    def write_tsv(self, directory) -> None:
        """Canonical TSV serialization (names, stored order); reloading it
        reproduces the id maps and the triple multiset."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, triples in self.splits.items():
            with open(directory / f"{name}.txt", "w", encoding="utf-8") as fh:
                for s, r, o in triples:
                    fh.write(f"{self.entity_names[s]}\t{self.relation_names[r]}"
                             f"\t{self.entity_names[o]}\n")


@dataclass
class BenchmarkLabels:
    train: LabelSet
    test: LabelSet
    class_names: list[str]


# --- triple TSV loading ------------------------------------------------------

def _read_triple_file(path) -> list[tuple[str, str, str]]:
    rows = []
    with _open_text(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"expected subject<TAB>relation<TAB>object, "
                                f"got {len(parts)} fields", file=str(path), line=line_no)
            rows.append((parts[0].strip(), parts[1].strip(), parts[2].strip()))
    if not rows:
        raise DataError("empty triple file", file=str(path))
    return rows


def load_triple_tsv(train_path, valid_path, test_path,
                    allow_unseen: bool = False) -> DatasetBundle:
    """Load train/valid/test triple TSVs with first-seen-order ids.

    Validation/test triples referencing entities or relations absent from
    the training vocabulary are rejected unless allow_unseen is set (the
    standard benchmarks contain none; a violation indicates a loading bug).
    """
    paths = {"train": train_path, "valid": valid_path, "test": test_path}
    raw = {name: _read_triple_file(path) for name, path in paths.items()}

    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}

    def intern(table: dict, name: str) -> int:
        if name not in table:
            table[name] = len(table)
        return table[name]

    splits = {}
    for s, r, o in raw["train"]:
        intern(entity_ids, s), intern(relation_ids, r), intern(entity_ids, o)
    for name in ("train", "valid", "test"):
        triples = []
        unseen = 0
        for s, r, o in raw[name]:
            if not allow_unseen and name != "train":
                if s not in entity_ids or o not in entity_ids or r not in relation_ids:
                    unseen += 1
                    continue
            triples.append((intern(entity_ids, s), intern(relation_ids, r),
                            intern(entity_ids, o)))
        if unseen:
            raise DataError(f"{unseen} {name} triples reference entities/relations "
                            f"outside the train vocabulary", file=str(paths[name]))
        splits[name] = np.array(triples, dtype=np.int64).reshape(-1, 3)

    entity_names = [None] * len(entity_ids)
    for name, idx in entity_ids.items():
        entity_names[idx] = name
    relation_names = [None] * len(relation_ids)
    for name, idx in relation_ids.items():
        relation_names[idx] = name
    return DatasetBundle(entity_names, relation_names, splits, task="linkpred")


# --- N-Triples parsing --------------------------------------------------------

def _scan_term(line: str, pos: int, file: str, line_no: int,
               allow_literal: bool) -> tuple[str, int]:
    """Scan one term starting at `pos`; returns (token, next position)."""
    n = len(line)
    while pos < n and line[pos] in " \t":
        pos += 1
    if pos >= n:
        raise DataError("unexpected end of statement", file=file, line=line_no)
    ch = line[pos]
    if ch == "<":
        end = line.find(">", pos + 1)
        if end < 0:
            raise DataError("unterminated IRI", file=file, line=line_no)
        return line[pos:end + 1], end + 1
    if ch == "_" and pos + 1 < n and line[pos + 1] == ":":
        end = pos + 2
        while end < n and line[end] not in " \t":
            end += 1
        return line[pos:end], end
    if ch == '"' and allow_literal:
        i = pos + 1
        while i < n:
            if line[i] == "\\":
                i += 2
                continue
            if line[i] == '"':
                break
            i += 1
        if i >= n:
            raise DataError("unterminated literal", file=file, line=line_no)
        end = i + 1
        if end < n and line[end] == "@":
            while end < n and line[end] not in " \t":
                end += 1
        elif end + 1 < n and line[end:end + 2] == "^^":
            close = line.find(">", end + 2)
            if close < 0 or line[end + 2] != "<":
                raise DataError("malformed literal datatype", file=file, line=line_no)
            end = close + 1
        return line[pos:end], end
    raise DataError(f"unparseable term starting with {ch!r}", file=file, line=line_no)


def parse_ntriples(path) -> list[tuple[str, str, str]]:
    """Parse an N-Triples file into verbatim (subject, predicate, object) tokens."""
    statements = []
    with _open_text(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            subject, pos = _scan_term(line, 0, str(path), line_no, allow_literal=False)
            predicate, pos = _scan_term(line, pos, str(path), line_no, allow_literal=False)
            if not predicate.startswith("<"):
                raise DataError("predicate must be an IRI", file=str(path), line=line_no)
            obj, pos = _scan_term(line, pos, str(path), line_no, allow_literal=True)
            rest = line[pos:].strip()
            if rest != ".":
                raise DataError("statement must end with '.'", file=str(path), line=line_no)
            statements.append((subject, predicate, obj))
    return statements


# --- classification datasets ---------------------------------------------------

@dataclass(frozen=True)
class LabelSpec:
    """Where the gold labels live: benchmark split files and their columns."""

    train_file: str
    test_file: str
    entity_column: str
    label_column: str


@dataclass(frozen=True)
class LabelLeakPolicy:
    """Which relations encode the prediction target, and how to strip them."""

    relations_to_remove: frozenset
    mode: str = REMOVE_RELATION

    def __post_init__(self):
        if self.mode not in (REMOVE_RELATION, REMOVE_TARGET):
            raise DataError(f"unknown leak-removal mode {self.mode!r}")

    def matches(self, predicate_token: str) -> bool:
        iri = predicate_token[1:-1] if predicate_token.startswith("<") else predicate_token
        local = iri.rsplit("#", 1)[-1].rsplit("/", 1)[-1]
        return iri in self.relations_to_remove or local in self.relations_to_remove


def _read_label_split(path, spec: LabelSpec) -> list[tuple[str, str]]:
    with _open_text(path) as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
        try:
            entity_col = header.index(spec.entity_column)
            label_col = header.index(spec.label_column)
        except ValueError:
            raise DataError(f"columns {spec.entity_column!r}/{spec.label_column!r} "
                            f"not found in header {header}", file=str(path)) from None
        rows = []
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) <= max(entity_col, label_col):
                raise DataError("short row in label split", file=str(path), line=line_no)
            rows.append((parts[entity_col].strip(), parts[label_col].strip()))
    if not rows:
        raise DataError("empty label split", file=str(path))
    return rows


def load_rdf_classification(graph_path, label_spec: LabelSpec,
                            leak_policy: LabelLeakPolicy) -> DatasetBundle:
    """Load an RDF classification dataset from N-Triples plus label splits.

    Literals and resources both become nodes. Label-bearing triples are
    removed according to the leak policy before the vocabulary is built, so
    a relation with no surviving statements disappears entirely.
    """
    statements = parse_ntriples(graph_path)
    train_rows = _read_label_split(label_spec.train_file, label_spec)
    test_rows = _read_label_split(label_spec.test_file, label_spec)
    labeled_tokens = {f"<{entity}>" for entity, _ in train_rows + test_rows}

    kept = []
    removed: dict[str, int] = {}
    for s, p, o in statements:
        if leak_policy.matches(p) and (leak_policy.mode == REMOVE_RELATION
                                       or s in labeled_tokens):
            removed[p] = removed.get(p, 0) + 1
            continue
        kept.append((s, p, o))

    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}

    def intern(table: dict, name: str) -> int:
        if name not in table:
            table[name] = len(table)
        return table[name]

    triples = np.array([(intern(entity_ids, s), intern(relation_ids, p),
                         intern(entity_ids, o)) for s, p, o in kept],
                       dtype=np.int64).reshape(-1, 3)

    class_ids: dict[str, int] = {}
    def label_rows_to_set(rows, path) -> LabelSet:
        nodes, classes = [], []
        for entity, label in rows:
            token = f"<{entity}>"
            if token not in entity_ids:
                raise DataError(f"labeled entity {entity} missing from the graph",
                                file=str(path))
            nodes.append(entity_ids[token])
            classes.append(intern(class_ids, label))
        return nodes, classes

    train_nodes, train_classes = label_rows_to_set(train_rows, label_spec.train_file)
    test_nodes, test_classes = label_rows_to_set(test_rows, label_spec.test_file)
    class_names = [None] * len(class_ids)
    for name, idx in class_ids.items():
        class_names[idx] = name
    num_classes = len(class_names)

    labels = BenchmarkLabels(
        train=LabelSet(np.array(train_nodes, dtype=np.int64),
                       np.array(train_classes, dtype=np.int64), num_classes),
        test=LabelSet(np.array(test_nodes, dtype=np.int64),
                      np.array(test_classes, dtype=np.int64), num_classes),
        class_names=class_names)

    entity_names = [None] * len(entity_ids)
    for name, idx in entity_ids.items():
        entity_names[idx] = name
    relation_names = [None] * len(relation_ids)
    for name, idx in relation_ids.items():
        relation_names[idx] = name
    return DatasetBundle(entity_names, relation_names, {"graph": triples},
                         task="classify", labels=labels, removed_triples=removed)


# --- statistics ----------------------------------------------------------------

@dataclass
class StatsDiff:
    diffs: list[tuple[str, object, object]]  # (field, expected, actual)

    @property
    def passed(self) -> bool:
        return not self.diffs

    def __bool__(self):
        return self.passed

    def __str__(self):
        if self.passed:
            return "stats match"
        return "; ".join(f"{name}: expected {exp}, got {act}"
                         for name, exp, act in self.diffs)


def validate_stats(bundle: DatasetBundle, expected: dict) -> StatsDiff:
    """Field-by-field comparison against an expected-statistics record.

    Only fields present in `expected` are checked; an empty record passes
    vacuously.
    """
    actual = bundle.stats()
    diffs = [(key, value, actual.get(key))
             for key, value in expected.items() if actual.get(key) != value]
    return StatsDiff(diffs)


# --- bundled dataset registry ----------------------------------------------------

def default_data_dir() -> Path:
    return Path(os.environ.get("RGCN_DATA_DIR", "data"))


@dataclass(frozen=True)
class RdfDatasetFiles:
    directory: str
    graph_file: str
    label_spec_columns: tuple[str, str]  # (entity_column, label_column)
    leak_policy: LabelLeakPolicy
    expected_stats: dict
    train_split: str = "trainingSet.tsv"
    test_split: str = "testSet.tsv"


@dataclass(frozen=True)
class TsvDatasetFiles:
    directory: str
    expected_stats: dict


RDF_DATASETS = {
    "aifb": RdfDatasetFiles(
        directory="aifb", graph_file="aifb.nt.gz",
        label_spec_columns=("person", "label_affiliation"),
        leak_policy=LabelLeakPolicy(frozenset({"employs", "affiliation"}), REMOVE_RELATION),
        expected_stats={"entities": 8285, "relations": 45, "edges": 29043,
                        "labeled": 176, "classes": 4}),
    "mutag": RdfDatasetFiles(
        directory="mutag", graph_file="mutag.nt.gz",
        label_spec_columns=("bond", "label_mutagenic"),
        leak_policy=LabelLeakPolicy(frozenset({"isMutagenic"}), REMOVE_TARGET),
        expected_stats={"entities": 23644, "relations": 23, "edges": 74227,
                        "labeled": 340, "classes": 2}),
    "bgs": RdfDatasetFiles(
        directory="bgs", graph_file="bgs.nt.gz",
        label_spec_columns=("rock", "label_lithogenesis"),
        leak_policy=LabelLeakPolicy(frozenset({"hasLithogenesis"}), REMOVE_RELATION),
        expected_stats={"entities": 333845, "relations": 103, "edges": 916199,
                        "labeled": 146, "classes": 2},
        train_split="trainingSet(lith).tsv", test_split="testSet(lith).tsv"),
    "am": RdfDatasetFiles(
        directory="am", graph_file="am.nt.gz",
        label_spec_columns=("proxy", "label_cateogory"),
        leak_policy=LabelLeakPolicy(frozenset({"objectCategory", "material"}), REMOVE_RELATION),
        expected_stats={"entities": 1666764, "relations": 133, "edges": 5988321,
                        "labeled": 1000, "classes": 11}),
}

TSV_DATASETS = {
    "fb15k": TsvDatasetFiles("fb15k", {"entities": 14951, "relations": 1345,
                                       "train_edges": 483142, "valid_edges": 50000,
                                       "test_edges": 59071}),
    "wn18": TsvDatasetFiles("wn18", {"entities": 40943, "relations": 18,
                                     "train_edges": 141442, "valid_edges": 5000,
                                     "test_edges": 5000}),
    "fb15k-237": TsvDatasetFiles("fb15k-237", {"entities": 14541, "relations": 237,
                                               "train_edges": 272115, "valid_edges": 17535,
                                               "test_edges": 20466}),
}


def _find_split(directory: Path, stem: str) -> Path:
    for suffix in (".txt", ".txt.gz", ".tsv", ".tsv.gz"):
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    raise DataError(f"no {stem} split found under {directory}")


def load_dataset(name: str, data_dir=None) -> DatasetBundle:
    """Load a bundled benchmark by name (aifb, mutag, bgs, am, fb15k, wn18,
    fb15k-237), rooted at data_dir (default $RGCN_DATA_DIR or ./data)."""
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    if name in RDF_DATASETS:
        files = RDF_DATASETS[name]
        directory = data_dir / files.directory
        graph_path = directory / files.graph_file
        if not graph_path.exists():
            raise DataError(f"graph file {graph_path} not found "
                            f"(see scripts/prepare_data.py)")
        entity_col, label_col = files.label_spec_columns
        spec = LabelSpec(train_file=str(directory / files.train_split),
                         test_file=str(directory / files.test_split),
                         entity_column=entity_col, label_column=label_col)
        return load_rdf_classification(graph_path, spec, files.leak_policy)
    if name in TSV_DATASETS:
        files = TSV_DATASETS[name]
        directory = data_dir / files.directory
        return load_triple_tsv(_find_split(directory, "train"),
                               _find_split(directory, "valid"),
                               _find_split(directory, "test"))
    raise DataError(f"unknown dataset {name!r}; known: "
                    f"{sorted(RDF_DATASETS) + sorted(TSV_DATASETS)}")


def expected_stats(name: str) -> dict:
    if name in RDF_DATASETS:
        return dict(RDF_DATASETS[name].expected_stats)
    if name in TSV_DATASETS:
        return dict(TSV_DATASETS[name].expected_stats)
    raise DataError(f"unknown dataset {name!r}")
