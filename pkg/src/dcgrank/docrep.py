"""Graph-augmented document representations.

BiLSTM encoder over the abstract, restricted GCN over the document-concept
graph, a linear fusion of the two, and an LSTM title decoder whose sequence
cross-entropy shapes the fused vector.

Every block exposes a ``*_forward`` returning ``(output, cache)`` and a
``*_backward`` that accumulates parameter gradients into the ``ParamStore``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import EOS_ID, PAD_ID, Document
from .dcgraph import DocumentConceptGraph, MatchOverlay
from .lstm import lstm_backward, lstm_forward, reverse_index
from .numkit import DimensionError, ParamStore, relu, softmax_xent_rows

DEFAULT_MAX_TITLE_LEN = 30


def pad_batch(seqs, min_len: int = 1):
    lengths = np.array([len(s) for s in seqs], dtype=int)
    T = max(int(lengths.max()) if len(seqs) else 0, min_len)
    ids = np.full((len(seqs), T), PAD_ID, dtype=int)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    return ids, mask, lengths


def dropout_mask(shape, rate: float, rng: np.random.Generator | None):
    if rate <= 0.0 or rng is None:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def embedding_backward(params: ParamStore, ids: np.ndarray, d_emb: np.ndarray,
                       name: str = "embedding") -> None:
    g = params.grad(name)
    np.add.at(g, ids.ravel(), d_emb.reshape(-1, d_emb.shape[-1]))
    g[PAD_ID] = 0.0


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderStates:
    states: np.ndarray   # (k, H): forward half then backward half
    pooled: np.ndarray   # (1, H): Enc(d)


def encoder_forward(params: ParamStore, seqs, n_layers: int, dropout: float = 0.0,
                    rng: np.random.Generator | None = None):
    """Stacked BiLSTM over a batch of token-id sequences.

    Returns ``(states (B,T,H), pooled (B,H), cache)``.  Dropout is applied
    between stacked layers and on the pooled vector when ``rng`` is given.
    """
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot encode an empty token sequence")
    ids, mask, lengths = pad_batch(seqs)
    B, T = ids.shape
    rows = np.arange(B)[:, None]
    rev = reverse_index(lengths, T)
    inp = params["embedding"][ids]
    layers = []
    for k in range(n_layers):
        out_f, cache_f = lstm_forward(params, f"enc.l{k}.fw", inp, mask)
        out_r, cache_b = lstm_forward(params, f"enc.l{k}.bw", inp[rows, rev], mask)
        out = np.concatenate([out_f, out_r[rows, rev]], axis=2)
        drop = dropout_mask(out.shape, dropout, rng) if k < n_layers - 1 else None
        if drop is not None:
            out = out * drop
        layers.append((cache_f, cache_b, drop))
        inp = out
    pooled = inp.sum(axis=1) / lengths[:, None]
    pool_drop = dropout_mask(pooled.shape, dropout, rng)
    if pool_drop is not None:
        pooled = pooled * pool_drop
    cache = (ids, mask, lengths, rev, layers, pool_drop)
    return inp, pooled, cache


def encoder_backward(params: ParamStore, d_pooled: np.ndarray, cache) -> None:
    ids, mask, lengths, rev, layers, pool_drop = cache
    B, T = ids.shape
    rows = np.arange(B)[:, None]
    if pool_drop is not None:
        d_pooled = d_pooled * pool_drop
    d_out = np.repeat((d_pooled / lengths[:, None])[:, None, :], T, axis=1) * mask[:, :, None]
    for cache_f, cache_b, drop in reversed(layers):
        if drop is not None:
            d_out = d_out * drop
        H = d_out.shape[2] // 2
        dX_f, _, _ = lstm_backward(params, d_out[:, :, :H], cache_f)
        dX_r, _, _ = lstm_backward(params, d_out[:, :, H:][rows, rev], cache_b)
        d_out = dX_f + dX_r[rows, rev]
    embedding_backward(params, ids, d_out)


def encode(document: Document, params: ParamStore, n_layers: int = 3) -> EncoderStates:
    """Evaluation-mode encoding of one document."""
    if not document.tokens:
        raise ValueError(f"document {document.id!r} has no tokens")
    states, pooled, _ = encoder_forward(params, [document.tokens], n_layers)
    return EncoderStates(states[0], pooled)


# ---------------------------------------------------------------------------
# restricted GCN
# ---------------------------------------------------------------------------


@dataclass
class GraphStates:
    docs: list[np.ndarray]       # per layer, (n_docs, d_l)
    concepts: list[np.ndarray]   # per layer, (n_concepts, d_l)


def _row_normalize(adj: np.ndarray, norm: str) -> np.ndarray:
    if norm == "sum":
        return adj
    if norm == "mean":
        deg = (adj != 0).sum(axis=1, keepdims=True)
        return adj / np.maximum(deg, 1)
    raise ValueError(f"unknown GCN normalization {norm!r}")


def _check_dims(x: np.ndarray, w: np.ndarray, what: str) -> None:
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"{what}: state dim {x.shape[1]} does not match weight {w.shape}")


def concept_forward(params: ParamStore, adj: np.ndarray, Gc0: np.ndarray, layers: int,
                    self_loops: bool = True, norm: str = "sum"):
    """Concept-to-concept propagation; concepts never read document states."""
    A = _row_normalize(adj, norm)
    states, pres = [Gc0], []
    G = Gc0
    for l in range(layers):
        Wc = params[f"gcn.l{l}.Wc"]
        _check_dims(G, Wc, f"concept layer {l}")
        pre = A @ G @ Wc
        if self_loops:
            pre = pre + G @ params[f"gcn.l{l}.Wcs"]
        pres.append(pre)
        G = relu(pre)
        states.append(G)
    return states, (A, states, pres, self_loops)


def concept_backward(params: ParamStore, d_states: list[np.ndarray], cache) -> np.ndarray:
    """``d_states[l]`` is the gradient on layer-l concept states; returns d Gc0."""
    A, states, pres, self_loops = cache
    d = [x.copy() for x in d_states]
    for l in reversed(range(len(pres))):
        dpre = d[l + 1] * (pres[l] > 0)
        if not dpre.any():
            continue
        G = states[l]
        Wc = params[f"gcn.l{l}.Wc"]
        AG = A @ G
        params.grad(f"gcn.l{l}.Wc")[...] += AG.T @ dpre
        d[l] += A.T @ (dpre @ Wc.T)
        if self_loops:
            Wcs = params[f"gcn.l{l}.Wcs"]
            params.grad(f"gcn.l{l}.Wcs")[...] += G.T @ dpre
            d[l] += dpre @ Wcs.T
    return d[0]


def doc_forward(params: ParamStore, adj: np.ndarray, Gd0: np.ndarray,
                concept_states: list[np.ndarray], layers: int,
                self_loops: bool = True, norm: str = "sum"):
    """Document updates from incoming concept messages (``adj`` carries alpha)."""
    A = _row_normalize(adj, norm)
    states, pres, msgs = [Gd0], [], []
    G = Gd0
    for l in range(layers):
        Wd = params[f"gcn.l{l}.Wd"]
        _check_dims(concept_states[l], Wd, f"document layer {l} messages")
        msg = A @ concept_states[l]
        pre = msg @ Wd
        if self_loops:
            Wds = params[f"gcn.l{l}.Wds"]
            _check_dims(G, Wds, f"document layer {l} self-loop")
            pre = pre + G @ Wds
        msgs.append(msg)
        pres.append(pre)
        G = relu(pre)
        states.append(G)
    return states, (A, states, pres, msgs, self_loops)


def doc_backward(params: ParamStore, d_top: np.ndarray, cache, n_concept_layers: int):
    """Returns ``(d Gd0, [d concept state per layer])``."""
    A, states, pres, msgs, self_loops = cache
    d_concepts = [None] * (n_concept_layers + 1)
    dG = d_top
    for l in reversed(range(len(pres))):
        dpre = dG * (pres[l] > 0)
        Wd = params[f"gcn.l{l}.Wd"]
        params.grad(f"gcn.l{l}.Wd")[...] += msgs[l].T @ dpre
        d_concepts[l] = A.T @ (dpre @ Wd.T)
        if self_loops:
            Wds = params[f"gcn.l{l}.Wds"]
            params.grad(f"gcn.l{l}.Wds")[...] += states[l].T @ dpre
            dG = dpre @ Wds.T
        else:
            dG = np.zeros_like(states[l])
    return dG, d_concepts


def propagate(graph: DocumentConceptGraph, initial: GraphStates, params: ParamStore,
              alpha: float = 1.0, layers: int = 2, matched: MatchOverlay | None = None,
              self_loops: bool = True, norm: str = "sum") -> GraphStates:
    """Full-graph, bulk-synchronous propagation (evaluation only, no cache)."""
    if alpha < 1.0:
        raise ValueError("alpha must be >= 1")
    if layers < 1:
        raise ValueError("layers must be >= 1")
    c_states, _ = concept_forward(params, graph.concept_adjacency(), initial.concepts[0],
                                  layers, self_loops, norm)
    adj = graph.doc_adjacency(range(graph.num_docs), matched, alpha)
    d_states, _ = doc_forward(params, adj, initial.docs[0], c_states, layers, self_loops, norm)
    return GraphStates(d_states, c_states)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def fuse_forward(params: ParamStore, enc: np.ndarray, gcn: np.ndarray):
    x = np.concatenate([enc, gcn], axis=1)
    W = params["fuse.W"]
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"fuse input {x.shape} does not match weight {W.shape}")
    return x @ W + params["fuse.b"], (x, enc.shape[1])


def fuse_backward(params: ParamStore, dv: np.ndarray, cache):
    x, n_enc = cache
    params.grad("fuse.W")[...] += x.T @ dv
    params.grad("fuse.b")[...] += dv.sum(axis=0, keepdims=True)
    dx = dv @ params["fuse.W"].T
    return dx[:, :n_enc], dx[:, n_enc:]


def fuse(enc: np.ndarray, gcn: np.ndarray, params: ParamStore) -> np.ndarray:
    return fuse_forward(params, np.atleast_2d(enc), np.atleast_2d(gcn))[0]


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def title_targets(title_tokens, max_len: int = DEFAULT_MAX_TITLE_LEN) -> list[int]:
    return list(title_tokens[:max_len - 1]) + [EOS_ID]


def _decoder_init(params: ParamStore, v: np.ndarray):
    h0 = v @ params["dec.init_h.W"] + params["dec.init_h.b"]
    c0 = v @ params["dec.init_c.W"] + params["dec.init_c.b"]
    return h0, c0


def decoder_forward(params: ParamStore, v: np.ndarray, targets, feed_doc: bool = False):
    """Teacher-forced title decoding from document vectors ``v`` (B, D).

    ``targets`` are full target sequences (EOS included).  Step 0 reads EOS
    as its start symbol.  Returns per-document mean cross-entropy (B,).
    """
    inputs = [[EOS_ID] + list(t[:-1]) for t in targets]
    ids, mask, lengths = pad_batch(inputs)
    tgt, _, _ = pad_batch(targets)
    X = params["embedding"][ids]
    if feed_doc:
        X = np.concatenate([X, np.repeat(v[:, None, :], ids.shape[1], axis=1)], axis=2)
    h0, c0 = _decoder_init(params, v)
    out, lcache = lstm_forward(params, "dec", X, mask, h0, c0)
    valid = mask.astype(bool)
    hidden = out[valid]
    logits = hidden @ params["dec.out.W"] + params["dec.out.b"]
    step_loss, d_logits = softmax_xent_rows(logits, tgt[valid])
    per_step = np.zeros(ids.shape)
    per_step[valid] = step_loss
    losses = per_step.sum(axis=1) / lengths
    cache = (v, ids, mask, lengths, lcache, valid, hidden, d_logits, feed_doc, X.shape)
    return losses, cache


def decoder_backward(params: ParamStore, d_losses: np.ndarray, cache) -> np.ndarray:
    v, ids, mask, lengths, lcache, valid, hidden, d_logits, feed_doc, xshape = cache
    scale = np.repeat((d_losses / lengths)[:, None], ids.shape[1], axis=1)[valid]
    dl = d_logits * scale[:, None]
    params.grad("dec.out.W")[...] += hidden.T @ dl
    params.grad("dec.out.b")[...] += dl.sum(axis=0, keepdims=True)
    d_out = np.zeros((ids.shape[0], ids.shape[1], hidden.shape[1]))
    d_out[valid] = dl @ params["dec.out.W"].T
    dX, dh0, dc0 = lstm_backward(params, d_out, lcache)
    E = params["embedding"].shape[1]
    embedding_backward(params, ids, dX[:, :, :E])
    params.grad("dec.init_h.W")[...] += v.T @ dh0
    params.grad("dec.init_h.b")[...] += dh0.sum(axis=0, keepdims=True)
    params.grad("dec.init_c.W")[...] += v.T @ dc0
    params.grad("dec.init_c.b")[...] += dc0.sum(axis=0, keepdims=True)
    dv = dh0 @ params["dec.init_h.W"].T + dc0 @ params["dec.init_c.W"].T
    if feed_doc:
        dv = dv + dX[:, :, E:].sum(axis=1)
    return dv


def decode_loss(document: Document, v_d: np.ndarray, params: ParamStore,
                max_len: int = DEFAULT_MAX_TITLE_LEN, feed_doc: bool = False) -> float | None:
    """Mean token cross-entropy of the document's title, or None if untitled."""
    if not document.title_tokens:
        return None
    losses, _ = decoder_forward(params, np.atleast_2d(v_d),
                                [title_targets(document.title_tokens, max_len)], feed_doc)
    return float(losses[0])


def graph_loss(doc_losses) -> float:
    """Mean over documents of per-document title losses; ``None`` entries skipped."""
    kept = [x for x in doc_losses if x is not None]
    if not kept:
        raise ValueError("no document in the batch has a title")
    return float(np.mean(kept))


def greedy_decode(params: ParamStore, v_d: np.ndarray, max_len: int = DEFAULT_MAX_TITLE_LEN,
                  feed_doc: bool = False) -> list[int]:
    """Free-running argmax generation; stops at EOS or ``max_len`` tokens."""
    v = np.atleast_2d(v_d)
    h, c = _decoder_init(params, v)
    tok = EOS_ID
    out: list[int] = []
    one = np.ones((1, 1))
    for _ in range(max_len):
        x = params["embedding"][[tok]]
        if feed_doc:
            x = np.concatenate([x, v], axis=1)
        step, cache = lstm_forward(params, "dec", x[:, None, :], one, h, c)
        h_prev, c_prev, i, f, o, g, tc = cache[3][0]
        c = f * c_prev + i * g
        h = step[:, 0]
        logits = h @ params["dec.out.W"] + params["dec.out.b"]
        tok = int(np.argmax(logits[0]))
        if tok == EOS_ID:
            break
        out.append(tok)
    return out
