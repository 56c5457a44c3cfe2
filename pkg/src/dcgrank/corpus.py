"""Document, concept and vocabulary ingestion."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
FIELD_TOKENS = ("<disease>", "<gene>", "<variant>", "<demographic>", "<mesh>")
SPECIAL_TOKENS = (PAD, UNK, EOS) + FIELD_TOKENS
PAD_ID, UNK_ID, EOS_ID = 0, 1, 2

_PUNCT = "!\"#$%&'()*+,./:;<=>?@[\\]^_`{|}~"
_EDGE_PUNCT = re.compile(rf"^([{re.escape(_PUNCT)}]*)(.*?)([{re.escape(_PUNCT)}]*)$", re.S)


class IngestionError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and peel leading/trailing punctuation.

    Each peeled punctuation character becomes its own token; inner
    punctuation ("p.v600e", "brca1/2") stays attached.
    """
    tokens: list[str] = []
    for chunk in text.lower().split():
        lead, core, trail = _EDGE_PUNCT.match(chunk).groups()
        tokens.extend(lead)
        if core:
            tokens.append(core)
        tokens.extend(trail)
    return tokens


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


@dataclass
class Document:
    id: str
    tokens: list[int]
    title_tokens: list[int]
    concept_ids: frozenset[str]
    mesh: list[str] = field(default_factory=list)


@dataclass
class Concept:
    id: str
    surface_forms: frozenset[str]
    embedding: np.ndarray | None = None


class Vocabulary:
    """Token/index bijection with fixed special tokens at the front."""

    def __init__(self, tokens):
        self.tokens: list[str] = list(SPECIAL_TOKENS)
        seen = set(self.tokens)
        for tok in sorted(set(tokens)):
            if tok not in seen:
                self.tokens.append(tok)
                seen.add(tok)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, index: int) -> str:
        return self.tokens[index]

    def encode(self, tokens) -> list[int]:
        return [self.index(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


def embedding_bound(dim: int) -> float:
    return math.sqrt(3.0 / dim)


def init_embeddings(vocab_size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform in [-sqrt(3/dim), +sqrt(3/dim)] with a zero PAD row."""
    if dim < 1:
        raise ValueError("embedding dim must be >= 1")
    bound = embedding_bound(dim)
    emb = rng.uniform(-bound, bound, size=(vocab_size, dim))
    emb[PAD_ID] = 0.0
    return emb


def read_embedding_file(path) -> dict[str, np.ndarray]:
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise IngestionError(f"{path}:{lineno}: expected 'token v1 ... vdim'")
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise IngestionError(
                    f"{path}:{lineno}: expected {dim} values, got {vec.size}")
            if not np.all(np.isfinite(vec)):
                raise IngestionError(f"{path}:{lineno}: non-finite value")
            vectors[parts[0]] = vec
    return vectors


def load_pretrained(vocab: Vocabulary, path, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Pretrained vectors by token; random rows for misses; PAD zeroed."""
    vectors = read_embedding_file(path)
    emb = init_embeddings(len(vocab), dim, rng)
    hits = 0
    for tok, vec in vectors.items():
        if vec.size != dim:
            raise IngestionError(f"{path}: vectors have dim {vec.size}, expected {dim}")
        i = vocab.index(tok)
        if i != UNK_ID or tok == UNK:
            emb[i] = vec
            hits += 1
    if hits == 0:
        raise IngestionError(f"{path}: no vocabulary token covered")
    emb[PAD_ID] = 0.0
    log.info("pretrained embeddings: %d/%d tokens covered", hits, len(vocab))
    return emb


def concept_embeddings(concepts: list[Concept], vocab: Vocabulary, emb: np.ndarray) -> np.ndarray:
    """Mean of the token embeddings over all surface forms of each concept."""
    out = np.zeros((len(concepts), emb.shape[1]))
    for k, c in enumerate(concepts):
        ids = [vocab.index(t) for form in sorted(c.surface_forms) for t in tokenize(form)]
        if ids:
            out[k] = emb[ids].mean(axis=0)
    return out


@dataclass
class Corpus:
    documents: list[Document]
    concepts: list[Concept]
    vocab: Vocabulary

    def __post_init__(self):
        self._doc_index = {d.id: i for i, d in enumerate(self.documents)}
        self._concept_index = {c.id: i for i, c in enumerate(self.concepts)}

    def doc_index(self, doc_id: str) -> int:
        try:
            return self._doc_index[doc_id]
        except KeyError:
            raise KeyError(f"unknown document id {doc_id!r}") from None

    def concept_index(self, concept_id: str) -> int:
        try:
            return self._concept_index[concept_id]
        except KeyError:
            raise KeyError(f"unknown concept id {concept_id!r}") from None

    def document(self, doc_id: str) -> Document:
        return self.documents[self.doc_index(doc_id)]

    @property
    def doc_ids(self) -> list[str]:
        return [d.id for d in self.documents]

    # -- bundle (de)serialization ------------------------------------------

    def to_json(self) -> dict:
        return {
            "vocab": self.vocab.tokens,
            "concepts": [{"id": c.id, "surface_forms": sorted(c.surface_forms)}
                         for c in self.concepts],
            "documents": [{"id": d.id, "tokens": d.tokens, "title_tokens": d.title_tokens,
                           "concepts": sorted(d.concept_ids), "mesh": d.mesh}
                          for d in self.documents],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Corpus":
        vocab = Vocabulary(data["vocab"])
        if vocab.tokens != data["vocab"]:
            raise IngestionError("bundle vocabulary is not in canonical order")
        concepts = [Concept(c["id"], frozenset(c["surface_forms"])) for c in data["concepts"]]
        docs = [Document(d["id"], list(d["tokens"]), list(d["title_tokens"]),
                         frozenset(d["concepts"]), list(d.get("mesh", [])))
                for d in data["documents"]]
        return cls(docs, concepts, vocab)


def read_concepts(path) -> list[Concept]:
    forms: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1].strip():
                raise IngestionError(f"{path}:{lineno}: expected 'concept_id<TAB>surface_form'")
            forms.setdefault(parts[0], set()).add(parts[1].strip())
    return [Concept(cid, frozenset(forms[cid])) for cid in sorted(forms)]


def read_docs(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc.msg}") from None
            for key in ("id", "title", "abstract"):
                if not isinstance(rec.get(key), str):
                    raise IngestionError(f"{path}:{lineno}: missing string field {key!r}")
            rec.setdefault("concepts", [])
            rec["_line"] = lineno
            records.append(rec)
    return records


def build_corpus(records: list[dict], concepts: list[Concept]) -> Corpus:
    known = {c.id for c in concepts}
    seen: set[str] = set()
    unresolved: set[str] = set()
    for rec in records:
        if rec["id"] in seen:
            raise IngestionError(f"duplicate document id {rec['id']!r}")
        seen.add(rec["id"])
        unresolved.update(c for c in rec["concepts"] if c not in known)
    if unresolved:
        raise IngestionError("unresolved concept ids: " + ", ".join(sorted(unresolved)))

    tok_abstracts = [tokenize(r["abstract"]) for r in records]
    tok_titles = [tokenize(r["title"]) for r in records]
    words: set[str] = set()
    for toks in tok_abstracts + tok_titles:
        words.update(toks)
    for c in concepts:
        for form in c.surface_forms:
            words.update(tokenize(form))
    for r in records:
        for term in r.get("mesh", []):
            words.update(tokenize(term))
    vocab = Vocabulary(words)

    docs = []
    for rec, toks, title in zip(records, tok_abstracts, tok_titles):
        if not toks:
            raise IngestionError(f"document {rec['id']!r} has an empty abstract")
        docs.append(Document(rec["id"], vocab.encode(toks), vocab.encode(title),
                             frozenset(rec["concepts"]), list(rec.get("mesh", []))))
    return Corpus(docs, concepts, vocab)


def load_corpus(docs_file, concepts_file) -> Corpus:
    corpus = build_corpus(read_docs(docs_file), read_concepts(concepts_file))
    log.info("corpus: %d documents, %d concepts, %d vocabulary entries",
             len(corpus.documents), len(corpus.concepts), len(corpus.vocab))
    return corpus


def save_bundle(corpus: Corpus, out_dir, embeddings: np.ndarray, meta: dict | None = None) -> Path:
    from .numkit import write_records

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = corpus.to_json()
    data["meta"] = dict(meta or {})
    (out / "corpus.json").write_text(json.dumps(data, sort_keys=True), encoding="utf-8")
    write_records(out / "embeddings.ckpt", {"embedding": embeddings},
                  {"kind": "embeddings", **dict(meta or {})})
    return out


def load_bundle(bundle_dir) -> tuple[Corpus, np.ndarray]:
    from .numkit import read_records

    bundle = Path(bundle_dir)
    data = json.loads((bundle / "corpus.json").read_text(encoding="utf-8"))
    _, records = read_records(bundle / "embeddings.ckpt")
    return Corpus.from_json(data), records["embedding"]
