"""Adagrad training: MeSH pre-training and clinical-topic fine-tuning."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .metrics import QRels, mean_average_precision
from .model import GraphRankModel, config_hash
from .numkit import ParamStore, read_records, write_records
from .queryrep import ExpansionLexicon, Query, expand
from .ranker import TrainPair

log = logging.getLogger(__name__)

_STAGE_CODE = {"pretrain": 1, "finetune": 2}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 50
    batch_size: int = 16
    dropout: float = 0.5
    seed: int = 0
    alpha: float = 1.6
    stage: str = "pretrain"
    momentum: float = 0.9
    pairs_per_query: int = 50
    select_best: bool = True
    paranoid: bool = False
    paranoid_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.alpha < 1.0:
            raise ValueError("alpha must be >= 1")
        if self.stage not in _STAGE_CODE:
            raise ValueError(f"stage must be one of {sorted(_STAGE_CODE)}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adagrad_step(param: np.ndarray, grad: np.ndarray, accum: np.ndarray, lr: float,
                 eps: float = 1e-8, momentum: float = 0.0,
                 velocity: np.ndarray | None = None) -> np.ndarray:
    """In-place Adagrad update; returns the step that was subtracted.

    ``accum += g**2``; ``step = lr * g / (sqrt(accum) + eps)``.  With
    ``momentum > 0`` the preconditioned step feeds a heavy-ball velocity.
    """
    accum += grad * grad
    step = lr * grad / (np.sqrt(accum) + eps)
    if momentum:
        velocity *= momentum
        velocity += step
        step = velocity
    param -= step
    return step


class Adagrad:
    def __init__(self, params: ParamStore, lr: float, momentum: float = 0.0, eps: float = 1e-8):
        self.lr, self.momentum, self.eps = lr, momentum, eps
        self.accum = params.zeros_like()
        self.velocity = params.zeros_like()

    def step(self, params: ParamStore, frozen=frozenset()) -> None:
        bad = [n for n in params.names() if not np.all(np.isfinite(params.grad(n)))]
        if bad:
            raise TrainingError("non-finite gradient in: " + ", ".join(bad))
        for n in params.names():
            if n in frozen:
                continue
            adagrad_step(params[n], params.grad(n), self.accum[n], self.lr, self.eps,
                         self.momentum, self.velocity[n])

    def state_records(self) -> dict[str, np.ndarray]:
        out = {f"adagrad.accum/{n}": a for n, a in self.accum.items()}
        out.update({f"adagrad.velocity/{n}": v for n, v in self.velocity.items()})
        return out

    def load_state(self, records: dict[str, np.ndarray]) -> None:
        for n in self.accum.names():
            self.accum[n][...] = records[f"adagrad.accum/{n}"]
            self.velocity[n][...] = records[f"adagrad.velocity/{n}"]


# ---------------------------------------------------------------------------
# pair construction
# ---------------------------------------------------------------------------


def sample_negatives(positives, doc_ids, seed: int) -> list[tuple]:
    """For each ``(query, doc_id)`` draw a uniformly random different document."""
    doc_ids = list(doc_ids)
    if len(doc_ids) < 2:
        raise TrainingError("negative sampling needs at least two documents")
    rng = np.random.default_rng(seed)
    index = {d: i for i, d in enumerate(doc_ids)}
    out = []
    for query, pos in positives:
        k = int(rng.integers(len(doc_ids) - 1))
        k += k >= index[pos]
        out.append((query, pos, doc_ids[k]))
    return out


def graded_pairs(qid: str, judged: dict[str, int], doc_ids, limit: int,
                 rng: np.random.Generator) -> list[TrainPair]:
    """Up to ``limit`` pairs (a, b) with rel(a) > rel(b), sampled uniformly.

    Unjudged corpus documents count as relevance 0.
    """
    rel = np.array([judged.get(d, 0) for d in doc_ids])
    docs = np.array(doc_ids)
    order = np.argsort(rel, kind="stable")
    sorted_rel = rel[order]
    # for each candidate "better" doc: number of docs with strictly lower grade
    lower = np.searchsorted(sorted_rel, rel, side="left")
    total = int(lower.sum())
    if total == 0:
        return []
    picks = np.sort(rng.choice(total, size=min(limit, total), replace=False))
    cum = np.cumsum(lower)
    better = np.searchsorted(cum, picks, side="right")
    offset = picks - (cum[better] - lower[better])
    return [TrainPair(qid, str(docs[b]), str(docs[order[o]])) for b, o in zip(better, offset)]


def mesh_pairs(corpus: Corpus, lexicon: ExpansionLexicon | None, seed: int):
    """One MeSH query per document plus a sampled unrelated article."""
    missing = [d.id for d in corpus.documents if not d.mesh]
    if missing:
        raise TrainingError("documents without MeSH terms: " + ", ".join(missing))
    queries = {}
    positives = []
    for d in corpus.documents:
        q = Query(f"mesh:{d.id}", mesh=tuple(d.mesh))
        queries[q.id] = expand(q, lexicon) if lexicon is not None else q
        positives.append((q.id, d.id))
    triples = sample_negatives(positives, corpus.doc_ids, seed)
    return queries, [TrainPair(q, pos, neg) for q, pos, neg in triples]


def split_pairs(pairs: list, seed: int, ratio=(8, 1, 1)):
    """Seeded 8:1:1 train/validation/test split."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(pairs))
    total = sum(ratio)
    n_train = int(round(len(pairs) * ratio[0] / total))
    n_val = int(round(len(pairs) * ratio[1] / total))
    parts = (idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:])
    return tuple([pairs[i] for i in sorted(p)] for p in parts)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def ranking_map(model: GraphRankModel, queries, qrels: QRels) -> float:
    run = {q: [d for d, _ in r] for q, r in model.rank(queries).items()}
    return mean_average_precision(run, qrels)


def full_rank_loss(model: GraphRankModel, queries, qrels: QRels) -> float:
    """Evaluation-mode L_rank over every graded pair of every query."""
    doc_ids = model.corpus.doc_ids
    enc_all = model.encode_all()
    c_states = None if model.config.ablate_graph else model.concept_states()
    total, count = 0.0, 0
    for q in queries:
        judged = qrels.get(q.id, {})
        scores = model.score_query(q, doc_ids, enc_all, c_states)
        s = np.array([scores[d] for d in doc_ids])
        rel = np.array([judged.get(d, 0) for d in doc_ids])
        better = rel[:, None] > rel[None, :]
        hinge = np.maximum(0.0, model.config.margin + s[:, None] - s[None, :])
        total += float(hinge[better].sum())
        count += int(better.sum())
    if count == 0:
        raise ValueError("no graded pairs")
    return total / count


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    train_rank: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_rank: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("inf")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Trainer:
    """Runs one stage; resumable from a checkpoint written by :meth:`save`."""

    def __init__(self, model: GraphRankModel, config: TrainConfig):
        self.model = model
        self.config = config
        model.config.dropout = config.dropout
        model.config.alpha = config.alpha
        self.optimizer = Adagrad(model.params, config.learning_rate, config.momentum)
        self.epoch = 0
        self.history = History()
        self.best = model.params.copy()
        self.steps = 0

    def _rng(self, *keys) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, _STAGE_CODE[self.config.stage], *keys])

    def _spot_check(self, pairs, queries, step_key) -> None:
        p = self.model.params
        rng = self._rng(*step_key, 7)
        i = int(rng.integers(p.size))
        analytic = p.flat_grad()[i]
        flat = p.flat()
        base, eps = flat[i], 1e-5
        saved = {n: p.grad(n).copy() for n in p.names()}
        vals = []
        for x in (base + eps, base - eps):
            flat[i] = x
            p.set_flat(flat)
            vals.append(self.model.objective(pairs, queries, self._rng(*step_key), backward=False).loss)
        flat[i] = base
        p.set_flat(flat)
        for n, g in saved.items():
            p.grad(n)[...] = g
        numeric = (vals[0] - vals[1]) / (2 * eps)
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        if err > 1e-3:
            raise TrainingError(f"gradient spot check failed at flat index {i}: "
                                f"analytic {analytic:.6g}, numeric {numeric:.6g}")

    def run_epoch(self, pairs: list[TrainPair], queries: dict[str, Query]) -> tuple[float, float]:
        cfg = self.config
        order = self._rng(self.epoch, 0).permutation(len(pairs))
        losses, ranks = [], []
        for b, start in enumerate(range(0, len(pairs), cfg.batch_size)):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            key = (self.epoch, 1, b)
            self.model.params.zero_grad()
            res = self.model.objective(batch, queries, self._rng(*key))
            if not np.isfinite(res.loss):
                raise TrainingError(f"non-finite loss at epoch {self.epoch}, batch {b}")
            self.steps += 1
            if cfg.paranoid and self.steps % cfg.paranoid_every == 0:
                self._spot_check(batch, queries, key)
            self.optimizer.step(self.model.params, self.model.frozen)
            losses.append(res.loss)
            ranks.append(res.l_rank)
        return float(np.mean(losses)), float(np.mean(ranks))

    def evaluate_pairs(self, pairs, queries) -> tuple[float, float]:
        if not pairs:
            return float("nan"), float("nan")
        loss = rank = 0.0
        for start in range(0, len(pairs), 64):
            batch = pairs[start:start + 64]
            res = self.model.objective(batch, queries, None, backward=False)
            loss += res.loss * len(batch)
            rank += res.l_rank * len(batch)
        return loss / len(pairs), rank / len(pairs)

    def fit(self, make_pairs, queries: dict[str, Query], val_pairs=(), checkpoint_path=None):
        """Train until ``config.epochs``; ``make_pairs(epoch)`` yields that epoch's pairs."""
        cfg = self.config
        while self.epoch < cfg.epochs:
            self.epoch += 1
            pairs = make_pairs(self.epoch)
            if not pairs:
                log.warning("epoch %d: no training pairs", self.epoch)
                continue
            tl, tr = self.run_epoch(pairs, queries)
            vl, vr = self.evaluate_pairs(list(val_pairs), queries)
            h = self.history
            h.train_loss.append(tl)
            h.train_rank.append(tr)
            h.val_loss.append(vl)
            h.val_rank.append(vr)
            score = vr if val_pairs else tr
            if score < h.best_score:
                h.best_score, h.best_epoch = score, self.epoch
                self.best = self.model.params.copy()
            log.info("%s epoch %d: train %.6f (rank %.6f) val %.6f (rank %.6f)",
                     cfg.stage, self.epoch, tl, tr, vl, vr)
            if checkpoint_path and cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                self.save(f"{checkpoint_path}.epoch{self.epoch}")
        if cfg.select_best and val_pairs and self.history.best_epoch:
            self.model.params.set_flat(self.best.flat())
        if checkpoint_path:
            self.save(checkpoint_path)
        return self.model

    # -- checkpoints ---------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        records = {f"param/{n}": a for n, a in self.model.params.items()}
        records.update({f"best/{n}": a for n, a in self.best.items()})
        records.update(self.optimizer.state_records())
        mcfg = self.model.config.to_dict()
        header = {
            "kind": "checkpoint",
            "epoch": self.epoch,
            "steps": self.steps,
            "stage": self.config.stage,
            "train_config": self.config.to_dict(),
            "config": mcfg,
            "config_hash": config_hash({"model": mcfg, "train": self.config.to_dict()}),
            "history": self.history.to_dict(),
            **dict(extra or {}),
        }
        write_records(path, records, header)

    def restore(self, path) -> None:
        header, records = read_records(path)
        p = self.model.params
        for n in p.names():
            p[n][...] = records[f"param/{n}"]
            self.best[n][...] = records[f"best/{n}"]
        self.optimizer.load_state(records)
        self.epoch = int(header["epoch"])
        self.steps = int(header.get("steps", 0))
        self.history = History(**header["history"])


def read_checkpoint_params(path) -> tuple[dict, ParamStore]:
    """Model parameters of a checkpoint (or of a plain model file)."""
    header, records = read_records(path)
    if header.get("kind") == "checkpoint":
        records = {k.split("/", 1)[1]: v for k, v in records.items() if k.startswith("param/")}
    return header, ParamStore(records)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def pretrain(model: GraphRankModel, config: TrainConfig, lexicon: ExpansionLexicon | None = None,
             checkpoint_path=None, resume_from=None) -> tuple[GraphRankModel, Trainer, dict]:
    """MeSH-query pre-training.  Returns the model, trainer and the pair split."""
    config = dataclasses.replace(config, stage="pretrain")
    queries, pairs = mesh_pairs(model.corpus, lexicon, config.seed)
    train, val, test = split_pairs(pairs, config.seed)
    trainer = Trainer(model, config)
    if resume_from:
        trainer.restore(resume_from)
    trainer.fit(lambda epoch: train, queries, val, checkpoint_path)
    return model, trainer, {"queries": queries, "train": train, "val": val, "test": test}


def finetune_pairs(topics, qrels: QRels, doc_ids, limit: int, rng: np.random.Generator):
    pairs = []
    for q in topics:
        pairs.extend(graded_pairs(q.id, qrels.get(q.id, {}), doc_ids, limit, rng))
    return pairs


def usable_topics(topics, qrels: QRels) -> list[Query]:
    kept = []
    for q in topics:
        if any(r > 0 for r in qrels.get(q.id, {}).values()):
            kept.append(q)
        else:
            log.warning("topic %s has no relevant document; excluded", q.id)
    return kept


def finetune(model: GraphRankModel, topics, qrels: QRels, config: TrainConfig,
             lexicon: ExpansionLexicon | None = None, checkpoint_path=None,
             resume_from=None) -> tuple[GraphRankModel, Trainer]:
    """Continue optimization on graded-qrels pairs of clinical topics."""
    config = dataclasses.replace(config, stage="finetune")
    topics = usable_topics(topics, qrels)
    trainer = Trainer(model, config)
    if not topics:
        return model, trainer
    queries = {q.id: expand(q, lexicon) if lexicon is not None else q for q in topics}
    doc_ids = model.corpus.doc_ids

    def make_pairs(epoch):
        rng = trainer._rng(epoch, 2)
        return finetune_pairs(list(queries.values()), qrels, doc_ids, config.pairs_per_query, rng)

    if resume_from:
        trainer.restore(resume_from)
    trainer.fit(make_pairs, queries, (), checkpoint_path)
    return model, trainer
