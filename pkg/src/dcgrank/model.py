"""The full ranking model: parameters plus the batched objective.

``GraphRankModel.objective`` evaluates ``beta * L_graph + gamma * L_rank`` on a
batch of training pairs and accumulates the exact gradient of that value
into ``model.params``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import docrep
from .corpus import PAD_ID, Corpus, concept_embeddings, init_embeddings
from .dcgraph import DocumentConceptGraph, MatchOverlay, matched_concepts
from .lstm import init_lstm
from .numkit import ParamStore, load_params, save_params
from .queryrep import Query, cnn_backward, cnn_forward, init_query_cnn, query_ids
from .ranker import (RankingConfig, TrainPair, rank_loss_backward, rank_loss_forward,
                     score_backward, score_forward)


@dataclass
class ModelConfig:
    emb_dim: int = 100
    enc_hidden: int = 50          # per direction
    enc_layers: int = 3
    gcn_dim: int = 100
    gcn_layers: int = 2
    doc_dim: int = 100
    dec_hidden: int = 100
    cnn_filters: int = 64
    cnn_widths: tuple[int, ...] = (2, 3)
    self_loops: bool = True
    gcn_norm: str = "sum"         # "sum" or "mean"
    dec_feed_doc: bool = False
    max_title_len: int = docrep.DEFAULT_MAX_TITLE_LEN
    dropout: float = 0.5
    alpha: float = 1.6
    alpha_scope: str = "batch"    # "batch" or "query"
    ablate_graph: bool = False
    freeze_embeddings: bool = False
    norm: str = "l2"
    margin: float = 0.1
    beta: float = 0.5
    gamma: float = 0.5

    def __post_init__(self):
        self.cnn_widths = tuple(int(w) for w in self.cnn_widths)
        if self.alpha < 1.0:
            raise ValueError("alpha must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.alpha_scope not in ("batch", "query"):
            raise ValueError("alpha_scope must be 'batch' or 'query'")
        if self.gcn_norm not in ("sum", "mean"):
            raise ValueError("gcn_norm must be 'sum' or 'mean'")
        RankingConfig(self.norm, self.margin, self.beta, self.gamma)

    @property
    def ranking(self) -> RankingConfig:
        return RankingConfig(self.norm, self.margin, self.beta, self.gamma)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cnn_widths"] = list(self.cnn_widths)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def config_hash(data: dict) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


def init_params(corpus: Corpus, config: ModelConfig, rng: np.random.Generator,
                embeddings: np.ndarray | None = None) -> ParamStore:
    c = config
    p = ParamStore()
    V = len(corpus.vocab)
    if embeddings is None:
        embeddings = init_embeddings(V, c.emb_dim, rng)
    if embeddings.shape != (V, c.emb_dim):
        raise ValueError(f"embedding matrix {embeddings.shape} does not match ({V}, {c.emb_dim})")
    emb = embeddings.copy()
    emb[PAD_ID] = 0.0
    p.add("embedding", emb)
    p.add("concept_embedding", concept_embeddings(corpus.concepts, corpus.vocab, emb)
          if corpus.concepts else np.zeros((0, c.emb_dim)))

    H = 2 * c.enc_hidden
    for k in range(c.enc_layers):
        n_in = c.emb_dim if k == 0 else H
        for d in ("fw", "bw"):
            init_lstm(p, f"enc.l{k}.{d}", n_in, c.enc_hidden, rng)

    def dense(name, n_in, n_out):
        s = 1.0 / np.sqrt(n_in)
        p.add(name, rng.uniform(-s, s, (n_in, n_out)))

    dense("gcn.bridge", H, c.gcn_dim)
    for l in range(c.gcn_layers):
        n_in = c.emb_dim if l == 0 else c.gcn_dim
        dense(f"gcn.l{l}.Wc", n_in, c.gcn_dim)
        dense(f"gcn.l{l}.Wd", n_in, c.gcn_dim)
        if c.self_loops:
            dense(f"gcn.l{l}.Wcs", n_in, c.gcn_dim)
            dense(f"gcn.l{l}.Wds", c.gcn_dim, c.gcn_dim)

    dense("fuse.W", H + c.gcn_dim, c.doc_dim)
    p.add("fuse.b", np.zeros((1, c.doc_dim)))

    dense("dec.init_h.W", c.doc_dim, c.dec_hidden)
    p.add("dec.init_h.b", np.zeros((1, c.dec_hidden)))
    dense("dec.init_c.W", c.doc_dim, c.dec_hidden)
    p.add("dec.init_c.b", np.zeros((1, c.dec_hidden)))
    init_lstm(p, "dec", c.emb_dim + (c.doc_dim if c.dec_feed_doc else 0), c.dec_hidden, rng)
    dense("dec.out.W", c.dec_hidden, V)
    p.add("dec.out.b", np.zeros((1, V)))

    init_query_cnn(p, c.emb_dim, c.cnn_filters, c.cnn_widths, c.doc_dim, rng)
    p.add("rank.W", np.eye(c.doc_dim))
    return p


@dataclass
class BatchResult:
    loss: float
    l_graph: float
    l_rank: float
    n_pairs: int
    n_titled: int
    untitled: int = 0
    scores: dict = field(default_factory=dict)


class GraphRankModel:
    def __init__(self, corpus: Corpus, graph: DocumentConceptGraph, config: ModelConfig,
                 params: ParamStore):
        if graph.doc_ids != corpus.doc_ids:
            raise ValueError("graph and corpus disagree on document order")
        self.corpus = corpus
        self.graph = graph
        self.config = config
        self.params = params
        self._concept_adj = graph.concept_adjacency()
        self._match_cache: dict[tuple, frozenset[str]] = {}

    @classmethod
    def create(cls, corpus, graph, config: ModelConfig, seed: int = 0, embeddings=None):
        rng = np.random.default_rng(seed)
        return cls(corpus, graph, config, init_params(corpus, config, rng, embeddings))

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        header = {"kind": "model", "config": self.config.to_dict(),
                  "config_hash": config_hash(self.config.to_dict()), **dict(extra or {})}
        save_params(path, self.params, header)

    @classmethod
    def load(cls, path, corpus, graph, **overrides) -> "GraphRankModel":
        header, params = load_params(path)
        cfg = dict(header["config"])
        cfg.update(overrides)
        return cls(corpus, graph, ModelConfig.from_dict(cfg), params)

    @property
    def frozen(self) -> frozenset[str]:
        """Parameter groups the optimizer must leave untouched."""
        if self.config.freeze_embeddings:
            return frozenset({"embedding", "concept_embedding"})
        return frozenset()

    def trainable_coords(self) -> np.ndarray:
        """Flat indices excluding the frozen PAD embedding row."""
        sl = self.params.slices()["embedding"]
        E = self.params["embedding"].shape[1]
        frozen = set(range(sl.start + PAD_ID * E, sl.start + (PAD_ID + 1) * E))
        return np.array([i for i in range(self.params.size) if i not in frozen])

    # -- query matching ------------------------------------------------------

    def matched_for(self, queries) -> frozenset[str]:
        key = tuple(sorted(q.id for q in queries))
        if key not in self._match_cache:
            phrases = [p for q in queries for p in q.phrases()]
            self._match_cache[key] = frozenset(matched_concepts(self.corpus, phrases))
        return self._match_cache[key]

    def overlay(self, queries) -> MatchOverlay:
        return self.graph.mark_matched(self.matched_for(queries))

    # -- training objective --------------------------------------------------

    def objective(self, pairs: list[TrainPair], queries: dict[str, Query],
                  rng: np.random.Generator | None = None, backward: bool = True) -> BatchResult:
        """Forward + backward of the total loss on one batch.

        ``rng`` enables dropout (training mode); ``None`` means evaluation mode.
        Gradients are added to the existing buffers (callers zero them).
        """
        c, p = self.config, self.params
        if not pairs:
            raise ValueError("empty batch")
        dropout = c.dropout if rng is not None else 0.0

        doc_ids = list(dict.fromkeys(d for pr in pairs for d in (pr.better, pr.worse)))
        doc_rows = [self.corpus.doc_index(d) for d in doc_ids]
        local = {d: k for k, d in enumerate(doc_ids)}
        qids = list(dict.fromkeys(pr.query_id for pr in pairs))
        batch_queries = [queries[q] for q in qids]

        # document instances: (doc position, match key)
        batch_key = "*"
        titled = [k for k, r in enumerate(doc_rows) if self.corpus.documents[r].title_tokens]
        untitled = len(doc_rows) - len(titled)
        use_graph = c.beta > 0 and titled
        if c.alpha_scope == "query":
            rank_keys = {(local[d], pr.query_id) for pr in pairs for d in (pr.better, pr.worse)}
        else:
            rank_keys = {(local[d], batch_key) for d in doc_ids}
        graph_keys = {(k, batch_key) for k in titled} if use_graph else set()
        instances = sorted(rank_keys | graph_keys, key=lambda x: (x[0], x[1]))
        inst_index = {key: i for i, key in enumerate(instances)}
        inst_doc = np.array([k for k, _ in instances], dtype=int)

        # encoder
        seqs = [self.corpus.documents[r].tokens for r in doc_rows]
        _, enc, enc_cache = docrep.encoder_forward(p, seqs, c.enc_layers, dropout, rng)
        enc_i = enc[inst_doc]

        # graph module
        if c.ablate_graph:
            gcn = np.zeros((len(instances), c.gcn_dim))
        else:
            c_states, c_cache = docrep.concept_forward(
                p, self._concept_adj, p["concept_embedding"], c.gcn_layers, c.self_loops, c.gcn_norm)
            overlays = {batch_key: self.overlay(batch_queries)}
            if c.alpha_scope == "query":
                for q in qids:
                    overlays[q] = self.overlay([queries[q]])
            adj = np.zeros((len(instances), self.graph.num_concepts))
            for i, (k, key) in enumerate(instances):
                adj[i] = self.graph.doc_adjacency([doc_rows[k]], overlays[key], c.alpha)[0]
            Gd0 = enc_i @ p["gcn.bridge"]
            d_states, d_cache = docrep.doc_forward(
                p, adj, Gd0, c_states, c.gcn_layers, c.self_loops, c.gcn_norm)
            gcn = d_states[-1]

        v_raw, fuse_cache = docrep.fuse_forward(p, enc_i, gcn)
        v_drop = docrep.dropout_mask(v_raw.shape, dropout, rng)
        v = v_raw * v_drop if v_drop is not None else v_raw

        # title decoder
        l_graph = 0.0
        if use_graph:
            g_rows = [inst_index[(k, batch_key)] for k in titled]
            targets = [docrep.title_targets(self.corpus.documents[doc_rows[k]].title_tokens,
                                            c.max_title_len) for k in titled]
            dec_losses, dec_cache = docrep.decoder_forward(p, v[g_rows], targets, c.dec_feed_doc)
            l_graph = float(dec_losses.mean())

        # query encoder + scores
        q_vecs, q_caches = [], []
        for q in batch_queries:
            vq, cache = cnn_forward(p, query_ids(q, self.corpus.vocab), c.cnn_widths)
            q_vecs.append(vq)
            q_caches.append(cache)
        VQ = np.concatenate(q_vecs, axis=0)
        q_local = {q: i for i, q in enumerate(qids)}

        def inst_of(doc, qid):
            return inst_index[(local[doc], qid if c.alpha_scope == "query" else batch_key)]

        pq = np.array([q_local[pr.query_id] for pr in pairs] * 2)
        pv = np.array([inst_of(pr.better, pr.query_id) for pr in pairs]
                      + [inst_of(pr.worse, pr.query_id) for pr in pairs])
        s, s_cache = score_forward(VQ[pq], v[pv], p["rank.W"], c.norm)
        n = len(pairs)
        l_rank, active = rank_loss_forward(s[:n], s[n:], c.margin)
        loss = c.beta * l_graph + c.gamma * l_rank
        result = BatchResult(loss, l_graph, l_rank, n, len(titled) if use_graph else 0, untitled,
                             {(pr.query_id, pr.better): s[i] for i, pr in enumerate(pairs)}
                             | {(pr.query_id, pr.worse): s[n + i] for i, pr in enumerate(pairs)})
        if not backward:
            return result

        # ---- backward ----
        dv = np.zeros_like(v)
        if c.gamma != 0.0:
            db, dw = rank_loss_backward(active, c.gamma)
            d_vq_rows, d_vd_rows, dW = score_backward(np.concatenate([db, dw]), p["rank.W"], s_cache)
            p.grad("rank.W")[...] += dW
            np.add.at(dv, pv, d_vd_rows)
            dVQ = np.zeros_like(VQ)
            np.add.at(dVQ, pq, d_vq_rows)
            for i, cache in enumerate(q_caches):
                if dVQ[i].any():
                    cnn_backward(p, dVQ[i:i + 1], cache)
        if use_graph:
            d_losses = np.full(len(titled), c.beta / len(titled))
            dv[g_rows] += docrep.decoder_backward(p, d_losses, dec_cache)
        if v_drop is not None:
            dv = dv * v_drop
        d_enc_i, d_gcn = docrep.fuse_backward(p, dv, fuse_cache)
        if not c.ablate_graph:
            dGd0, d_cstates = docrep.doc_backward(p, d_gcn, d_cache, c.gcn_layers)
            p.grad("gcn.bridge")[...] += enc_i.T @ dGd0
            d_enc_i = d_enc_i + dGd0 @ p["gcn.bridge"].T
            d_cstates[c.gcn_layers] = np.zeros_like(c_states[-1])
            p.grad("concept_embedding")[...] += docrep.concept_backward(p, d_cstates, c_cache)
        d_enc = np.zeros_like(enc)
        np.add.at(d_enc, inst_doc, d_enc_i)
        docrep.encoder_backward(p, d_enc, enc_cache)
        return result

    # -- evaluation ----------------------------------------------------------

    def encode_all(self, batch_size: int = 64) -> np.ndarray:
        """Evaluation-mode Enc(d) for every document, in corpus order."""
        out = []
        docs = self.corpus.documents
        for start in range(0, len(docs), batch_size):
            seqs = [d.tokens for d in docs[start:start + batch_size]]
            out.append(docrep.encoder_forward(self.params, seqs, self.config.enc_layers)[1])
        return np.concatenate(out, axis=0)

    def concept_states(self) -> list[np.ndarray]:
        c = self.config
        return docrep.concept_forward(self.params, self._concept_adj, self.params["concept_embedding"],
                                      c.gcn_layers, c.self_loops, c.gcn_norm)[0]

    def doc_vectors(self, rows, enc_all: np.ndarray, c_states, overlay: MatchOverlay | None) -> np.ndarray:
        c, p = self.config, self.params
        rows = list(rows)
        enc = enc_all[rows]
        if c.ablate_graph:
            gcn = np.zeros((len(rows), c.gcn_dim))
        else:
            adj = self.graph.doc_adjacency(rows, overlay, c.alpha)
            states, _ = docrep.doc_forward(p, adj, enc @ p["gcn.bridge"], c_states,
                                           c.gcn_layers, c.self_loops, c.gcn_norm)
            gcn = states[-1]
        return docrep.fuse_forward(p, enc, gcn)[0]

    def query_vector(self, query: Query) -> np.ndarray:
        return cnn_forward(self.params, query_ids(query, self.corpus.vocab), self.config.cnn_widths)[0]

    def score_query(self, query: Query, candidates, enc_all=None, c_states=None) -> dict[str, float]:
        rows = [self.corpus.doc_index(d) for d in candidates]
        enc_all = self.encode_all() if enc_all is None else enc_all
        c_states = (self.concept_states() if c_states is None else c_states) if not self.config.ablate_graph else None
        v = self.doc_vectors(rows, enc_all, c_states, self.overlay([query]))
        vq = self.query_vector(query)
        s, _ = score_forward(np.repeat(vq, len(rows), axis=0), v, self.params["rank.W"], self.config.norm)
        return {d: float(x) for d, x in zip(candidates, s)}

    def overlap_candidates(self, query: Query, limit: int) -> list[str]:
        """First-stage pool: top ``limit`` documents by matched-concept overlap."""
        matched = {self.graph.concept_index(c) for c in self.matched_for([query])}
        overlap = {d: len(matched.intersection(m)) for d, m in zip(self.graph.doc_ids, self.graph.doc_concepts)}
        return sorted(overlap, key=lambda d: (-overlap[d], d))[:limit]

    def rank(self, queries, candidates=None, depth: int | None = None, prefilter: int | None = None):
        """Rank ``candidates`` (default: whole corpus) for every query.

        ``prefilter`` restricts each query's pool to its top documents by
        concept overlap before scoring.
        """
        from .ranker import order_by_score

        candidates = list(candidates) if candidates is not None else self.corpus.doc_ids
        enc_all = self.encode_all()
        c_states = None if self.config.ablate_graph else self.concept_states()
        out = {}
        for q in queries:
            pool = candidates
            if prefilter is not None:
                keep = set(self.overlap_candidates(q, prefilter))
                pool = [d for d in candidates if d in keep]
            scores = self.score_query(q, pool, enc_all, c_states)
            order = order_by_score(scores)[:depth]
            out[q.id] = [(d, scores[d]) for d in order]
        return out
