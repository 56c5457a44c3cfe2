"""Document-Concept Graph construction.

Documents receive messages from the concepts they contain; concepts receive
messages from knowledge-base neighbours.  There are no doc->doc edges and
concepts never read document states.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, normalize, tokenize

log = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


@dataclass
class DocumentConceptGraph:
    doc_ids: list[str]
    concept_ids: list[str]
    doc_concepts: list[tuple[int, ...]]          # M_i: concept indices per document
    concept_neighbors: list[tuple[int, ...]]     # N_i: symmetric
    edge_labels: dict[tuple[int, int], tuple[str, ...]] = field(default_factory=dict)
    self_loops_rejected: int = 0

    def __post_init__(self):
        self._doc_index = {d: i for i, d in enumerate(self.doc_ids)}
        self._concept_index = {c: i for i, c in enumerate(self.concept_ids)}

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def num_concepts(self) -> int:
        return len(self.concept_ids)

    @property
    def num_containment_edges(self) -> int:
        return sum(len(m) for m in self.doc_concepts)

    @property
    def num_kb_edges(self) -> int:
        return sum(len(n) for n in self.concept_neighbors) // 2

    def doc_index(self, doc_id: str) -> int:
        try:
            return self._doc_index[doc_id]
        except KeyError:
            raise GraphError(f"unknown document {doc_id!r}") from None

    def concept_index(self, concept_id: str) -> int:
        try:
            return self._concept_index[concept_id]
        except KeyError:
            raise GraphError(f"unknown concept {concept_id!r}") from None

    def incoming(self, doc_id: str) -> set[str]:
        return {self.concept_ids[j] for j in self.doc_concepts[self.doc_index(doc_id)]}

    def neighbors(self, concept_id: str) -> set[str]:
        return {self.concept_ids[j] for j in self.concept_neighbors[self.concept_index(concept_id)]}

    def concept_adjacency(self) -> np.ndarray:
        adj = np.zeros((self.num_concepts, self.num_concepts))
        for i, nbrs in enumerate(self.concept_neighbors):
            adj[i, list(nbrs)] = 1.0
        return adj

    def doc_adjacency(self, doc_rows, matched: "MatchOverlay | None" = None,
                      alpha: float = 1.0) -> np.ndarray:
        """Weighted doc<-concept rows: ``alpha`` on matched edges, else 1."""
        rows = np.zeros((len(doc_rows), self.num_concepts))
        for r, i in enumerate(doc_rows):
            cols = list(self.doc_concepts[i])
            rows[r, cols] = 1.0
            if matched is not None and alpha != 1.0:
                for j in cols:
                    if matched.is_matched(i, j):
                        rows[r, j] = alpha
        return rows

    def mark_matched(self, matched_concepts) -> "MatchOverlay":
        return MatchOverlay.build(self, matched_concepts)

    def to_json(self) -> dict:
        kb = []
        for i, nbrs in enumerate(self.concept_neighbors):
            for j in nbrs:
                if i < j:
                    labels = list(self.edge_labels.get((i, j), ()))
                    kb.append([self.concept_ids[i], self.concept_ids[j], labels])
        return {
            "doc_ids": self.doc_ids,
            "concept_ids": self.concept_ids,
            "doc_concepts": [[self.concept_ids[j] for j in m] for m in self.doc_concepts],
            "kb_edges": kb,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DocumentConceptGraph":
        concept_ids = list(data["concept_ids"])
        cidx = {c: i for i, c in enumerate(concept_ids)}
        doc_concepts = [tuple(sorted(cidx[c] for c in m)) for m in data["doc_concepts"]]
        nbrs: list[set[int]] = [set() for _ in concept_ids]
        labels = {}
        for a, b, lab in data["kb_edges"]:
            i, j = cidx[a], cidx[b]
            nbrs[i].add(j)
            nbrs[j].add(i)
            labels[(min(i, j), max(i, j))] = tuple(lab)
        return cls(list(data["doc_ids"]), concept_ids, doc_concepts,
                   [tuple(sorted(n)) for n in nbrs], labels)


@dataclass(frozen=True)
class MatchOverlay:
    """Per-edge match flags over an immutable graph.

    Only doc<-concept edges carry flags; an edge is flagged when its concept
    is in the matched set.
    """

    graph: DocumentConceptGraph
    matched: frozenset[int]

    @classmethod
    def build(cls, graph: DocumentConceptGraph, matched_concepts) -> "MatchOverlay":
        idx = frozenset(graph.concept_index(c) for c in matched_concepts)
        return cls(graph, idx)

    def is_matched(self, doc_row: int, concept_col: int) -> bool:
        return concept_col in self.matched and concept_col in self.graph.doc_concepts[doc_row]

    def flagged_edges(self) -> set[tuple[str, str]]:
        g = self.graph
        return {(g.doc_ids[i], g.concept_ids[j])
                for i, m in enumerate(g.doc_concepts) for j in m if j in self.matched}


def read_kb_edges(path) -> list[tuple[str, str, str, int]]:
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphError(f"{path}:{lineno}: expected 'concept<TAB>relation<TAB>concept'")
            edges.append((parts[0], parts[1], parts[2], lineno))
    return edges


def build_graph(corpus: Corpus, kb_edges) -> DocumentConceptGraph:
    """Containment edges from document annotations plus undirected kb edges.

    ``kb_edges`` is a path to a kb TSV file or an iterable of
    ``(concept, relation, concept)`` triples.
    """
    if isinstance(kb_edges, (str, Path)):
        triples = read_kb_edges(kb_edges)
    else:
        triples = [(a, rel, b, k + 1) for k, (a, rel, b) in enumerate(kb_edges)]

    concept_ids = [c.id for c in corpus.concepts]
    cidx = {c: i for i, c in enumerate(concept_ids)}
    doc_concepts = [tuple(sorted(cidx[c] for c in d.concept_ids)) for d in corpus.documents]

    nbrs: list[set[int]] = [set() for _ in concept_ids]
    labels: dict[tuple[int, int], set[str]] = {}
    self_loops = 0
    for a, rel, b, lineno in triples:
        for cid in (a, b):
            if cid not in cidx:
                raise GraphError(f"kb edge on line {lineno} references unknown concept {cid!r}")
        i, j = cidx[a], cidx[b]
        if i == j:
            self_loops += 1
            continue
        nbrs[i].add(j)
        nbrs[j].add(i)
        labels.setdefault((min(i, j), max(i, j)), set()).add(rel)
    if self_loops:
        log.warning("rejected %d self-loop kb edge(s)", self_loops)

    graph = DocumentConceptGraph(
        corpus.doc_ids, concept_ids, doc_concepts,
        [tuple(sorted(n)) for n in nbrs],
        {k: tuple(sorted(v)) for k, v in labels.items()},
        self_loops_rejected=self_loops,
    )
    log.info("graph: %d docs, %d concepts, %d containment edges, %d kb edges",
             graph.num_docs, graph.num_concepts, graph.num_containment_edges, graph.num_kb_edges)
    return graph


def _contains_span(haystack: list[str], needle: list[str]) -> bool:
    n = len(needle)
    if n == 0 or n > len(haystack):
        return False
    return any(haystack[k:k + n] == needle for k in range(len(haystack) - n + 1))


def matched_concepts(corpus: Corpus, phrases) -> set[str]:
    """Concepts with a surface form occurring (as a token span) in any phrase.

    ``phrases`` are query strings: field values, expansion terms, MeSH terms.
    """
    tokenized = [tokenize(p) for p in phrases if p]
    out = set()
    for c in corpus.concepts:
        forms = [normalize(f).split() for f in c.surface_forms]
        if any(_contains_span(p, f) for p in tokenized for f in forms):
            out.add(c.id)
    return out


def save_graph(graph: DocumentConceptGraph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_json(), sort_keys=True), encoding="utf-8")


def load_graph(path) -> DocumentConceptGraph:
    return DocumentConceptGraph.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
