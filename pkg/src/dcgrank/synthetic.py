"""Seeded synthetic corpora for tests, demos and the acceptance runs.

Words are random consonant-vowel strings so that no two concepts share a
token by accident.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Concept, Corpus, build_corpus
from .metrics import write_qrels
from .queryrep import ExpansionLexicon, Query, write_queries

_CONS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"


def _words(n: int, rng: np.random.Generator, syllables: int = 3, taken=()) -> list[str]:
    seen = set(taken)
    out = []
    while len(out) < n:
        w = "".join(rng.choice(list(_CONS)) + rng.choice(list(_VOWELS)) for _ in range(syllables))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticData:
    records: list[dict]
    concepts: list[Concept]
    kb_edges: list[tuple[str, str, str]]
    queries: list[Query]
    qrels: dict[str, dict[str, int]]
    lexicon_rows: list[tuple[str, str, str]] = field(default_factory=list)

    def corpus(self) -> Corpus:
        return build_corpus([dict(r) for r in self.records], self.concepts)

    def lexicon(self) -> ExpansionLexicon:
        lex = ExpansionLexicon()
        for row in self.lexicon_rows:
            lex.add(*row)
        return lex

    def mesh_queries(self) -> list[Query]:
        return [Query(r["id"], mesh=tuple(r["mesh"])) for r in self.records if r.get("mesh")]

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / v for k, v in {
            "docs": "docs.jsonl", "concepts": "concepts.tsv", "kb": "kb_edges.tsv",
            "queries": "queries.jsonl", "qrels": "qrels.txt", "lexicon": "lexicon.tsv"}.items()}
        with open(paths["docs"], "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        with open(paths["concepts"], "w", encoding="utf-8") as fh:
            for c in self.concepts:
                for form in sorted(c.surface_forms):
                    fh.write(f"{c.id}\t{form}\n")
        with open(paths["kb"], "w", encoding="utf-8") as fh:
            for a, rel, b in self.kb_edges:
                fh.write(f"{a}\t{rel}\t{b}\n")
        with open(paths["lexicon"], "w", encoding="utf-8") as fh:
            for row in self.lexicon_rows:
                fh.write("\t".join(row) + "\n")
        write_queries(self.queries, paths["queries"])
        write_qrels(self.qrels, paths["qrels"])
        return paths


def _doc_text(concept_words, filler, rng, length):
    words = list(concept_words) + list(rng.choice(filler, size=max(0, length - len(concept_words))))
    rng.shuffle(words)
    return " ".join(words) + "."


def containment_fixture(n_docs: int = 50, n_concepts: int = 20, n_queries: int = 10,
                        seed: int = 0, doc_len: int = 10, n_filler: int = 40,
                        concepts_per_doc: tuple[int, int] = (1, 3), kb_edges: int = 10) -> SyntheticData:
    """Relevance by concept containment.

    Query k names concept k in its disease field.  A document containing that
    concept as its first (primary) concept gets grade 2, otherwise grade 1.
    """
    rng = np.random.default_rng(seed)
    names = _words(n_concepts, rng)
    filler = np.array(_words(n_filler, rng, taken=names))
    concepts = [Concept(f"c{k:02d}", frozenset({names[k]})) for k in range(n_concepts)]

    records = []
    for i in range(n_docs):
        k = rng.integers(concepts_per_doc[0], concepts_per_doc[1] + 1)
        # round-robin primary concept so every concept appears
        primary = i % n_concepts
        others = [int(c) for c in rng.permutation(n_concepts) if c != primary][:k - 1]
        cids = [primary] + others
        words = [names[c] for c in cids]
        records.append({
            "id": f"d{i:03d}",
            "title": " ".join(words[:2] + list(rng.choice(filler, size=1))),
            "abstract": _doc_text(words, filler, rng, doc_len),
            "concepts": [concepts[c].id for c in cids],
            "mesh": sorted(words),
        })

    kb = set()
    while len(kb) < min(kb_edges, n_concepts * (n_concepts - 1) // 2):
        a, b = sorted(rng.choice(n_concepts, size=2, replace=False))
        kb.add((concepts[a].id, "related_to", concepts[b].id))

    lexicon_rows = [("disease", names[k], f"{names[k]} syndrome") for k in range(0, n_concepts, 3)]
    queries, qrels = [], {}
    for k in range(n_queries):
        cid = concepts[k].id
        qid = f"q{k:02d}"
        queries.append(Query(qid, disease=names[k]))
        qrels[qid] = {r["id"]: 2 if r["concepts"][0] == cid else 1
                      for r in records if cid in r["concepts"]}
    return SyntheticData(records, concepts, sorted(kb), queries, qrels, lexicon_rows)


def kb_link_fixture(n_pairs: int = 16, docs_per_concept: int = 3, seed: int = 0,
                    doc_len: int = 8, n_filler: int = 30, mention: bool = True) -> SyntheticData:
    """Relevance induced only through knowledge-base edges.

    Each query names a concept that occurs in no document; its relevant
    documents contain a different concept linked to it in the kb.  With
    ``mention=False`` the annotated concepts never appear in document text.
    """
    rng = np.random.default_rng(seed)
    names = _words(2 * n_pairs, rng)
    filler = np.array(_words(n_filler, rng, taken=names))
    q_concepts = [Concept(f"q{k:02d}", frozenset({names[k]})) for k in range(n_pairs)]
    r_concepts = [Concept(f"r{k:02d}", frozenset({names[n_pairs + k]})) for k in range(n_pairs)]
    kb = [(q_concepts[k].id, "associated_with", r_concepts[k].id) for k in range(n_pairs)]

    records = []
    i = 0
    for k in range(n_pairs):
        for _ in range(docs_per_concept):
            other = int(rng.integers(n_pairs - 1))
            other += other >= k
            cids = [k, other] if rng.random() < 0.5 else [k]
            words = [names[n_pairs + c] for c in cids]
            shown = words if mention else []
            records.append({
                "id": f"d{i:03d}",
                "title": " ".join(shown + list(rng.choice(filler, size=1))),
                "abstract": _doc_text(shown, filler, rng, doc_len),
                "concepts": [r_concepts[c].id for c in cids],
                "mesh": sorted(words),
            })
            i += 1

    queries, qrels = [], {}
    for k in range(n_pairs):
        qid = f"t{k:02d}"
        queries.append(Query(qid, disease=names[k]))
        rid = r_concepts[k].id
        qrels[qid] = {r["id"]: 2 if r["concepts"][0] == rid else 1
                      for r in records if rid in r["concepts"]}
    return SyntheticData(records, q_concepts + r_concepts, kb, queries, qrels)


def toy_fixture() -> SyntheticData:
    """Five documents over four concepts; small enough for exhaustive checks."""
    concepts = [
        Concept("c1", frozenset({"leukemia", "leucocythemia"})),
        Concept("c2", frozenset({"cdk6"})),
        Concept("c3", frozenset({"pancreatic cancer"})),
        Concept("c4", frozenset({"braf"})),
    ]
    records = [
        {"id": "d1", "title": "Leukemia and CDK6", "abstract": "CDK6 amplification in leukemia.",
         "concepts": ["c1", "c2"], "mesh": ["leukemia"]},
        {"id": "d2", "title": "BRAF in pancreatic cancer",
         "abstract": "BRAF mutations drive pancreatic cancer growth.",
         "concepts": ["c3", "c4"], "mesh": ["pancreatic cancer"]},
        {"id": "d3", "title": "CDK6", "abstract": "Inhibition of CDK6 signalling.",
         "concepts": ["c2"], "mesh": ["cdk6"]},
        {"id": "d4", "title": "", "abstract": "Leucocythemia cases with BRAF.",
         "concepts": ["c1", "c4"], "mesh": ["braf"]},
        {"id": "d5", "title": "Cohort study", "abstract": "A cohort of patients was followed.",
         "concepts": [], "mesh": ["cohort"]},
    ]
    kb = [("c2", "interacts_with", "c4"), ("c1", "related_to", "c3")]
    queries = [Query("p1", disease="leukemia", gene="CDK6", demographic="45-year-old female"),
               Query("p2", disease="pancreatic cancer", gene="BRAF")]
    qrels = {"p1": {"d1": 2, "d3": 1, "d4": 1}, "p2": {"d2": 2, "d4": 1}}
    lexicon_rows = [("disease", "leukemia", "leucocythemia"), ("gene", "braf", "b-raf")]
    return SyntheticData(records, concepts, kb, queries, qrels, lexicon_rows)
