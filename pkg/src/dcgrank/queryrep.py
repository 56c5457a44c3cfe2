"""Structured-query expansion and the CNN query encoder."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import PAD_ID, Vocabulary, normalize, tokenize
from .numkit import ParamStore, relu

FIELDS = ("disease", "gene", "variant", "demographic")
EXPANDABLE = ("disease", "gene", "variant")
CATEGORIES = EXPANDABLE


class QueryError(ValueError):
    pass


@dataclass(frozen=True)
class Query:
    id: str
    disease: str = ""
    gene: str = ""
    variant: str = ""
    demographic: str = ""
    mesh: tuple[str, ...] = ()
    expansions: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not any(getattr(self, f).strip() for f in FIELDS) and not self.mesh:
            raise QueryError(f"query {self.id!r} has no non-empty field")

    @property
    def is_mesh(self) -> bool:
        return bool(self.mesh)

    def phrases(self) -> list[str]:
        """Every query string: field values, MeSH terms and expansions."""
        out = [getattr(self, f) for f in FIELDS if getattr(self, f).strip()]
        out.extend(self.mesh)
        for terms in self.expansions.values():
            out.extend(terms)
        return out


class ExpansionLexicon:
    """Category -> normalized term -> synonyms."""

    def __init__(self):
        self._table: dict[str, dict[str, set[str]]] = {c: {} for c in CATEGORIES}

    def add(self, category: str, term: str, synonym: str) -> None:
        if category not in self._table:
            raise QueryError(f"unknown lexicon category {category!r}")
        key, syn = normalize(term), normalize(synonym)
        if not key or not syn or key == syn:
            return
        self._table[category].setdefault(key, set()).add(syn)

    def lookup(self, category: str, term: str) -> set[str]:
        return set(self._table[category].get(normalize(term), ()))

    def lookup_any(self, term: str) -> set[str]:
        out: set[str] = set()
        for cat in CATEGORIES:
            out |= self.lookup(cat, term)
        return out

    def __len__(self) -> int:
        return sum(len(v) for t in self._table.values() for v in t.values())

    @classmethod
    def from_file(cls, path) -> "ExpansionLexicon":
        lex = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise QueryError(f"{path}:{lineno}: expected 'category<TAB>term<TAB>synonym'")
                try:
                    lex.add(*parts)
                except QueryError as exc:
                    raise QueryError(f"{path}:{lineno}: {exc}") from None
        return lex


def expand(query: Query, lexicon: ExpansionLexicon) -> Query:
    """Attach per-field expansion sets; original terms are kept as-is."""
    exp: dict[str, frozenset[str]] = {}
    for f in EXPANDABLE:
        value = getattr(query, f)
        if value.strip():
            exp[f] = frozenset(lexicon.lookup(f, value))
    for term in query.mesh:
        exp[f"mesh:{normalize(term)}"] = frozenset(lexicon.lookup_any(term))
    return replace(query, expansions=exp)


_AGE = re.compile(r"(\d+)\s*-?\s*(?:year|yr|y\.?o\b|y/o)", re.I)
_SEX = {"male": "male", "man": "male", "boy": "male", "m": "male",
        "female": "female", "woman": "female", "girl": "female", "f": "female"}


def demographic_tokens(text: str) -> list[str]:
    """Age as a decade bucket ("40s") plus a sex token; raw tokens otherwise."""
    out = []
    m = _AGE.search(text)
    if m:
        out.append(f"{int(m.group(1)) // 10 * 10}s")
    for tok in re.split(r"[^a-z]+", text.lower()):
        if tok in _SEX:
            out.append(_SEX[tok])
            break
    return out or tokenize(text)


def flatten(query: Query) -> list[str]:
    """Canonical token sequence: fields in fixed order, each after its separator.

    Expansion terms follow the original term, sorted lexicographically.
    MeSH terms are sorted, each with its own separator and expansions.
    """
    out: list[str] = []
    for f in FIELDS:
        value = getattr(query, f)
        if not value.strip():
            continue
        out.append(f"<{f}>")
        if f == "demographic":
            out.extend(demographic_tokens(value))
            continue
        out.extend(tokenize(value))
        for term in sorted(query.expansions.get(f, ())):
            out.extend(tokenize(term))
    for term in sorted(normalize(t) for t in query.mesh):
        out.append("<mesh>")
        out.extend(tokenize(term))
        for syn in sorted(query.expansions.get(f"mesh:{term}", ())):
            out.extend(tokenize(syn))
    return out


def query_ids(query: Query, vocab: Vocabulary) -> list[int]:
    ids = [i for i in vocab.encode(flatten(query)) if i != PAD_ID]
    if not ids:
        raise QueryError(f"query {query.id!r} flattens to an empty sequence")
    return ids


# ---------------------------------------------------------------------------
# CNN encoder
# ---------------------------------------------------------------------------


def init_query_cnn(params: ParamStore, emb_dim: int, n_filters: int, widths, out_dim: int,
                   rng: np.random.Generator) -> None:
    for w in widths:
        s = 1.0 / np.sqrt(w * emb_dim)
        params.add(f"qcnn.w{w}.K", rng.uniform(-s, s, (w * emb_dim, n_filters)))
        params.add(f"qcnn.w{w}.b", np.zeros((1, n_filters)))
    s = 1.0 / np.sqrt(len(widths) * n_filters)
    params.add("qcnn.out.W", rng.uniform(-s, s, (len(widths) * n_filters, out_dim)))
    params.add("qcnn.out.b", np.zeros((1, out_dim)))


def _windows(X: np.ndarray, w: int) -> np.ndarray:
    n = X.shape[0] - w + 1
    return np.stack([X[k:k + w].ravel() for k in range(n)])


def cnn_forward(params: ParamStore, ids: list[int], widths):
    """Embed, convolve per width, ReLU, max over windows, project.

    PAD ids are dropped first; a sequence shorter than the widest filter is
    right-padded with PAD so exactly one window exists.
    """
    ids = [i for i in ids if i != PAD_ID]
    if not ids:
        raise QueryError("empty query sequence")
    padded = ids + [PAD_ID] * max(0, max(widths) - len(ids))
    X = params["embedding"][padded]
    pools, parts = [], []
    for w in widths:
        U = _windows(X, w)
        act = relu(U @ params[f"qcnn.w{w}.K"] + params[f"qcnn.w{w}.b"])
        arg = act.argmax(axis=0)
        pools.append(act[arg, np.arange(act.shape[1])])
        parts.append((w, U, act, arg))
    pooled = np.concatenate(pools)[None, :]
    v = pooled @ params["qcnn.out.W"] + params["qcnn.out.b"]
    return v, (padded, pooled, parts)


def cnn_backward(params: ParamStore, dv: np.ndarray, cache) -> None:
    padded, pooled, parts = cache
    params.grad("qcnn.out.W")[...] += pooled.T @ dv
    params.grad("qcnn.out.b")[...] += dv
    d_pooled = (dv @ params["qcnn.out.W"].T)[0]
    E = params["embedding"].shape[1]
    dX = np.zeros((len(padded), E))
    offset = 0
    for w, U, act, arg in parts:
        F = act.shape[1]
        d_act = np.zeros_like(act)
        cols = np.arange(F)
        d_act[arg, cols] = d_pooled[offset:offset + F] * (act[arg, cols] > 0)
        offset += F
        params.grad(f"qcnn.w{w}.K")[...] += U.T @ d_act
        params.grad(f"qcnn.w{w}.b")[...] += d_act.sum(axis=0, keepdims=True)
        dU = d_act @ params[f"qcnn.w{w}.K"].T
        for k in range(dU.shape[0]):
            dX[k:k + w] += dU[k].reshape(w, E)
    g = params.grad("embedding")
    np.add.at(g, np.array(padded), dX)
    g[PAD_ID] = 0.0


def encode_query(query: Query, params: ParamStore, vocab: Vocabulary,
                 widths=(2, 3)) -> np.ndarray:
    """Vector representation (1 x D) of an already-expanded query."""
    return cnn_forward(params, query_ids(query, vocab), widths)[0]


def mesh_query(terms, lexicon: ExpansionLexicon | None = None, qid: str = "mesh") -> Query:
    if not terms:
        raise QueryError("MeSH query needs at least one term")
    q = Query(qid, mesh=tuple(terms))
    return expand(q, lexicon) if lexicon is not None else q


def encode_mesh_query(mesh_terms, lexicon: ExpansionLexicon | None, params: ParamStore,
                      vocab: Vocabulary, widths=(2, 3)) -> np.ndarray:
    return encode_query(mesh_query(mesh_terms, lexicon), params, vocab, widths)


def read_queries(path) -> list[Query]:
    queries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise QueryError(f"{path}:{lineno}: {exc.msg}") from None
            if "id" not in rec:
                raise QueryError(f"{path}:{lineno}: missing 'id'")
            try:
                if "mesh" in rec:
                    queries.append(Query(str(rec["id"]), mesh=tuple(rec["mesh"])))
                else:
                    queries.append(Query(str(rec["id"]), **{f: str(rec.get(f, "")) for f in FIELDS}))
            except QueryError as exc:
                raise QueryError(f"{path}:{lineno}: {exc}") from None
    return queries


def write_queries(queries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            if q.is_mesh:
                rec = {"id": q.id, "mesh": list(q.mesh)}
            else:
                rec = {"id": q.id, **{f: getattr(q, f) for f in FIELDS}}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_lexicon(path) -> ExpansionLexicon:
    return ExpansionLexicon.from_file(Path(path)) if path else ExpansionLexicon()
