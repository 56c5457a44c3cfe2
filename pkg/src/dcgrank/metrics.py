"""Ranked-retrieval metrics: DCG/NDCG, AP/MAP, MRR and precision at n.

A run is ``{query_id: [doc_id, ...]}`` in rank order (scored runs from
``ranker.read_run`` are accepted too).  Qrels are
``{query_id: {doc_id: relevance}}``; unjudged documents have relevance 0.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

QRels = dict[str, dict[str, int]]


def _doc_ids(entries) -> list[str]:
    return [e[0] if isinstance(e, tuple) else e for e in entries]


def dcg(rels, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return sum(r / math.log2(i + 2) for i, r in enumerate(list(rels)[:n]))


def ideal_order(judged: dict[str, int]) -> list[str]:
    """Descending relevance, then ascending document id."""
    return sorted(judged, key=lambda d: (-judged[d], d))


def ndcg_query(ranking, judged: dict[str, int], n: int) -> float | None:
    """Per-query NDCG(n); ``None`` when no document is relevant."""
    ideal = [judged[d] for d in ideal_order(judged)]
    idcg = dcg(ideal, n)
    if idcg == 0:
        return None
    return dcg([judged.get(d, 0) for d in _doc_ids(ranking)], n) / idcg


def average_precision(ranking, judged: dict[str, int], graded: bool = False) -> float | None:
    """Binary AP by default; ``graded`` weights each hit by its relevance.

    The graded form divides by the total relevance mass so it stays in [0, 1]
    and reduces to binary AP when every relevant grade is 1.
    """
    relevant = {d: r for d, r in judged.items() if r > 0}
    if not relevant:
        return None
    hits, total = 0, 0.0
    for rank, doc in enumerate(_doc_ids(ranking), 1):
        rel = relevant.get(doc, 0)
        if rel > 0:
            hits += 1
            total += (rel if graded else 1) * hits / rank
    norm = sum(relevant.values()) if graded else len(relevant)
    return total / norm


def reciprocal_rank(ranking, judged: dict[str, int]) -> float:
    for rank, doc in enumerate(_doc_ids(ranking), 1):
        if judged.get(doc, 0) > 0:
            return 1.0 / rank
    return 0.0


def precision_at_query(ranking, judged: dict[str, int], n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    top = _doc_ids(ranking)[:n]
    return sum(1 for d in top if judged.get(d, 0) > 0) / n


# ---------------------------------------------------------------------------
# run-level means
# ---------------------------------------------------------------------------


def _judged_queries(run, qrels: QRels, skipped: dict | None = None):
    out = []
    for qid in sorted(run):
        judged = qrels.get(qid)
        if judged is None:
            if skipped is not None:
                skipped["unjudged"] = skipped.get("unjudged", 0) + 1
            continue
        if not any(r > 0 for r in judged.values()):
            if skipped is not None:
                skipped["no_relevant"] = skipped.get("no_relevant", 0) + 1
            continue
        out.append(qid)
    return out


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def ndcg(run, qrels: QRels, n: int = 20) -> float:
    return _mean(ndcg_query(run[q], qrels[q], n) for q in _judged_queries(run, qrels))


def mean_average_precision(run, qrels: QRels, graded: bool = False) -> float:
    return _mean(average_precision(run[q], qrels[q], graded) for q in _judged_queries(run, qrels))


def mrr(run, qrels: QRels) -> float:
    return _mean(reciprocal_rank(run[q], qrels[q]) for q in _judged_queries(run, qrels))


def precision_at(run, qrels: QRels, n: int) -> float:
    return _mean(precision_at_query(run[q], qrels[q], n) for q in _judged_queries(run, qrels))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

DEFAULT_METRICS = ("ndcg@20", "map", "mrr", "p@1", "p@10")


def _metric_fn(name: str, graded_ap: bool):
    name = name.lower()
    if name.startswith("ndcg@"):
        n = int(name[5:])
        return lambda r, j: ndcg_query(r, j, n)
    if name.startswith("p@"):
        n = int(name[2:])
        return lambda r, j: precision_at_query(r, j, n)
    if name == "map":
        return lambda r, j: average_precision(r, j, graded_ap)
    if name == "mrr":
        return reciprocal_rank
    raise ValueError(f"unknown metric {name!r}")


@dataclass
class EvalReport:
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    def to_tsv(self) -> str:
        lines = ["query_id\tmetric\tvalue"]
        for qid in sorted(self.per_query):
            for m, v in self.per_query[qid].items():
                lines.append(f"{qid}\t{m}\t{v:.6f}")
        for m, v in self.means.items():
            lines.append(f"all\t{m}\t{v:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"means": self.means, "skipped": self.skipped,
                           "queries": len(self.per_query)}, indent=2, sort_keys=True)


def evaluate(run, qrels: QRels, metrics=DEFAULT_METRICS, graded_ap: bool = False) -> EvalReport:
    """Per-query and mean metrics over judged queries with a relevant document."""
    report = EvalReport()
    queries = _judged_queries(run, qrels, report.skipped)
    fns = {m: _metric_fn(m, graded_ap) for m in metrics}
    for qid in queries:
        report.per_query[qid] = {m: fn(run[qid], qrels[qid]) for m, fn in fns.items()}
    report.means = {m: _mean(report.per_query[q][m] for q in queries) for m in metrics}
    for reason, count in report.skipped.items():
        log.warning("skipped %d quer%s (%s)", count, "y" if count == 1 else "ies", reason)
    return report


# ---------------------------------------------------------------------------
# qrels I/O
# ---------------------------------------------------------------------------


class QrelsFormatError(ValueError):
    pass


def parse_qrels(lines) -> QRels:
    qrels: QRels = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise QrelsFormatError(f"line {lineno}: expected '<qid> 0 <doc> <rel>'")
        qid, _, doc, rel = parts
        try:
            value = int(rel)
        except ValueError:
            raise QrelsFormatError(f"line {lineno}: relevance {rel!r} is not an integer") from None
        if value < 0:
            # trec_eval uses negative grades for "unjudged"; treat as 0
            value = 0
        qrels.setdefault(qid, {})[doc] = value
    return qrels


def read_qrels(path) -> QRels:
    with open(path, encoding="utf-8") as fh:
        return parse_qrels(fh)


def format_qrels(qrels: QRels) -> list[str]:
    return [f"{q} 0 {d} {qrels[q][d]}" for q in sorted(qrels) for d in sorted(qrels[q])]


def write_qrels(qrels: QRels, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in format_qrels(qrels))
