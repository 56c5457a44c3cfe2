"""Distance scoring and the pairwise partial-order objective.

Smaller scores mean more relevant.  Run files store the negated distance so
that TREC's larger-is-better convention holds.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .numkit import DimensionError

DEFAULT_MARGIN = 0.1


@dataclass(frozen=True)
class RankingConfig:
    norm: str = "l2"
    margin: float = DEFAULT_MARGIN
    beta: float = 0.5
    gamma: float = 0.5

    def __post_init__(self):
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"norm must be 'l1' or 'l2', got {self.norm!r}")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


@dataclass(frozen=True)
class TrainPair:
    query_id: str
    better: str
    worse: str

    def __post_init__(self):
        if self.better == self.worse:
            raise ValueError(f"pair for {self.query_id!r} compares {self.better!r} with itself")


def score_forward(v_p: np.ndarray, v_d: np.ndarray, W: np.ndarray, norm: str = "l2"):
    """Row-wise distances ``||v_p W - v_d||``; returns ``(scores, cache)``."""
    if v_p.shape[1] != W.shape[0] or W.shape[1] != v_d.shape[1]:
        raise DimensionError(f"score: v_p {v_p.shape}, W {W.shape}, v_d {v_d.shape}")
    diff = v_p @ W - v_d
    if norm == "l2":
        s = np.sqrt((diff * diff).sum(axis=1))
    elif norm == "l1":
        s = np.abs(diff).sum(axis=1)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return s, (v_p, diff, s, norm)


def score_backward(d_scores: np.ndarray, W: np.ndarray, cache):
    """Returns ``(d_v_p, d_v_d, d_W)``.  The l2 kink at zero takes subgradient 0."""
    v_p, diff, s, norm = cache
    if norm == "l2":
        safe = np.where(s > 0, s, 1.0)
        d_diff = diff * (np.where(s > 0, d_scores / safe, 0.0))[:, None]
    else:
        d_diff = np.sign(diff) * d_scores[:, None]
    return d_diff @ W.T, -d_diff, v_p.T @ d_diff


def score(v_p, v_d, W, config: RankingConfig | None = None) -> float:
    norm = (config or RankingConfig()).norm
    v_p, v_d, W = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (v_p, v_d, W))
    return float(score_forward(v_p, v_d, W, norm)[0][0])


def pair_loss(f_better: float, f_worse: float, margin: float = 0.0) -> float:
    return max(0.0, margin + f_better - f_worse)


def rank_loss_forward(f_better: np.ndarray, f_worse: np.ndarray, margin: float):
    if len(f_better) == 0:
        raise ValueError("rank loss needs at least one pair")
    # difference first so equal scores give exactly ``margin``
    hinge = margin + (f_better - f_worse)
    active = hinge > 0
    h = np.where(active, hinge, 0.0)
    # shifted mean: exact when every pair has the same hinge value
    loss = float(h[0] + (h - h[0]).mean())
    return loss, active


def rank_loss_backward(active: np.ndarray, d_loss: float = 1.0):
    """Returns ``(d f_better, d f_worse)``."""
    g = active.astype(float) * d_loss / active.size
    return g, -g


def rank_loss(pairs, scores, margin: float = DEFAULT_MARGIN) -> float:
    """Mean hinge over ``pairs``.

    ``scores`` maps ``(query_id, doc_id)`` to a distance.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("rank loss needs at least one pair")
    fb = np.array([scores[(p.query_id, p.better)] for p in pairs])
    fw = np.array([scores[(p.query_id, p.worse)] for p in pairs])
    return rank_loss_forward(fb, fw, margin)[0]


def total_loss(l_graph: float, l_rank: float, config: RankingConfig | None = None) -> float:
    config = config or RankingConfig()
    return config.beta * l_graph + config.gamma * l_rank


def order_by_score(scores: dict[str, float]) -> list[str]:
    """Ascending distance; ties broken by ascending document id."""
    return sorted(scores, key=lambda d: (scores[d], d))


def rank_documents(query, candidates, model) -> list[tuple[str, float]]:
    """Rank candidate ids for ``query`` with ``model.score_query``."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidates to rank")
    scores = model.score_query(query, candidates)
    order = order_by_score(scores)
    return [(d, scores[d]) for d in order]


# ---------------------------------------------------------------------------
# TREC run files
# ---------------------------------------------------------------------------

_RUN_LINE = re.compile(r"^(\S+) Q0 (\S+) ([1-9]\d*) (-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?) (\S+)$")


class RunFormatError(ValueError):
    pass


def format_run(ranked: dict[str, list[tuple[str, float]]], tag: str) -> list[str]:
    lines = []
    for qid in sorted(ranked):
        for rank, (doc, dist) in enumerate(ranked[qid], 1):
            lines.append(f"{qid} Q0 {doc} {rank} {-dist:.17g} {tag}")
    return lines


def write_run(ranked: dict[str, list[tuple[str, float]]], path, tag: str = "dcgrank") -> None:
    if not re.fullmatch(r"\S+", tag):
        raise RunFormatError(f"run tag must be non-empty without whitespace: {tag!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in format_run(ranked, tag))


def parse_run(lines, strict: bool = True) -> dict[str, list[tuple[str, float]]]:
    """Parse TREC run lines into ``{qid: [(doc, score), ...]}`` ordered by rank.

    Strict mode enforces single-space separation, literal ``Q0``, contiguous
    ranks from 1, no duplicate documents, and non-increasing scores.
    """
    rows: dict[str, list[tuple[int, str, float]]] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if strict:
            m = _RUN_LINE.match(line)
            if not m:
                raise RunFormatError(f"line {lineno}: not a TREC run line: {line!r}")
            qid, doc, rank, sc, _ = m.groups()
        else:
            parts = line.split()
            if len(parts) != 6:
                raise RunFormatError(f"line {lineno}: expected 6 fields")
            qid, _, doc, rank, sc, _ = parts
        rows.setdefault(qid, []).append((int(rank), doc, float(sc)))
    out = {}
    for qid, entries in rows.items():
        if strict:
            ranks = [r for r, _, _ in entries]
            if ranks != list(range(1, len(entries) + 1)):
                raise RunFormatError(f"query {qid}: ranks are not contiguous from 1")
            docs = [d for _, d, _ in entries]
            if len(set(docs)) != len(docs):
                raise RunFormatError(f"query {qid}: duplicate document")
            scs = [s for _, _, s in entries]
            if any(a < b for a, b in zip(scs, scs[1:])):
                raise RunFormatError(f"query {qid}: scores increase with rank")
        # TREC ordering by score (desc); ties by ascending document id
        entries = sorted(entries, key=lambda e: (-e[2], e[1]))
        out[qid] = [(d, s) for _, d, s in entries]
    return out


def read_run(path, strict: bool = True):
    with open(path, encoding="utf-8") as fh:
        return parse_run(fh, strict)
