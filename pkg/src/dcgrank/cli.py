"""Command-line entry point.

Usage: ``dcgrank <command> [options]`` with commands ``ingest``,
``build-graph``, ``pretrain``, ``finetune``, ``rank``, ``eval`` and
``gradcheck``.

Configuration files are INI-style with optional ``[model]`` and ``[train]``
sections of ``key = value`` lines; values are parsed as JSON when possible
(``0.01``, ``true``, ``[2, 3]``) and as plain strings otherwise.  Command-line
flags override file values.  Every command writes a ``*.manifest.json`` next
to its output recording the effective config, input digests, seed, stage,
outputs and timing.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .dcgraph import build_graph, load_graph, save_graph
from .metrics import evaluate, read_qrels
from .model import GraphRankModel, ModelConfig, config_hash
from .numkit import grad_check
from .queryrep import expand, load_lexicon, read_queries
from .ranker import TrainPair, write_run
from .trainer import TrainConfig, finetune, pretrain, read_checkpoint_params

log = logging.getLogger("dcgrank")

GRADCHECK_TOL = 1e-4


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config and manifests
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path) -> dict[str, dict]:
    """``{"model": {...}, "train": {...}}`` from an INI-style file."""
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise CommandError(f"cannot read config file {path}")
    out: dict[str, dict] = {"model": {}, "train": {}}
    for section in parser.sections():
        if section not in out:
            raise CommandError(f"{path}: unknown section [{section}]")
        out[section] = {k: _parse_value(v) for k, v in parser[section].items()}
    return out


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(x for x in p.iterdir() if x.is_file() and not x.name.endswith(".manifest.json")) \
            if p.is_dir() else [p]
        for f in files:
            out[str(f)] = _file_digest(f)
    return out


class Manifest:
    """Reproducibility record; ``id`` depends on everything except timing."""

    def __init__(self, command: str, config: dict, inputs, seed: int, stage: str | None = None):
        self.data = {"command": command, "config": config, "inputs": _digests(inputs),
                     "seed": seed, "stage": stage, "outputs": []}
        self.id = config_hash(self.data)[:12]
        self.data["id"] = self.id
        self._start = time.time()

    def write(self, output, extra_outputs=()) -> Path:
        output = Path(output)
        self.data["outputs"] = [str(output), *map(str, extra_outputs)]
        self.data["timing"] = {"started": self._start, "seconds": round(time.time() - self._start, 3)}
        path = (output / "manifest.json") if output.is_dir() else output.with_name(output.name + ".manifest.json")
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        log.info("manifest %s written to %s", self.id, path)
        return path


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _model_overrides(args) -> dict:
    out = {}
    if args.ablate == "graph":
        out["ablate_graph"] = True
    if args.norm:
        out["norm"] = args.norm
    if args.margin is not None:
        out["margin"] = args.margin
    return out


def _train_config(args, stage: str, file_cfg: dict) -> TrainConfig:
    data = dict(file_cfg.get("train", {}))
    data["stage"] = stage
    data["seed"] = args.seed
    for key in ("epochs", "batch_size", "learning_rate"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if args.alpha is not None:
        data["alpha"] = args.alpha
    if args.ablate == "reward":
        data["alpha"] = 1.0
    if args.paranoid:
        data["paranoid"] = True
    return TrainConfig.from_dict(data)


def _load_inputs(args):
    corpus, emb = corpus_mod.load_bundle(args.bundle)
    graph = load_graph(args.graph)
    return corpus, emb, graph


def _build_model(args, corpus, emb, graph, file_cfg, stage: str):
    """Fresh model, or one initialized from ``--init``; flags override."""
    overrides = _model_overrides(args)
    init = getattr(args, "init", None)
    if init:
        header, params = read_checkpoint_params(init)
        cfg = dict(header["config"])
        cfg.update(file_cfg.get("model", {}))
        cfg.update(overrides)
        return GraphRankModel(corpus, graph, ModelConfig.from_dict(cfg), params)
    cfg = dict(file_cfg.get("model", {}))
    cfg.setdefault("emb_dim", int(emb.shape[1]))
    cfg.update(overrides)
    config = ModelConfig.from_dict(cfg)
    return GraphRankModel.create(corpus, graph, config, seed=args.seed, embeddings=emb)


def _file_config(args) -> dict:
    return read_config(args.config) if args.config else {"model": {}, "train": {}}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    corpus = corpus_mod.load_corpus(args.docs, args.concepts)
    rng = np.random.default_rng(args.seed)
    if args.embeddings:
        emb = corpus_mod.load_pretrained(corpus.vocab, args.embeddings, args.dim, rng)
        source = "pretrained"
    else:
        emb = corpus_mod.init_embeddings(len(corpus.vocab), args.dim, rng)
        source = "random"
        log.info("no embeddings file: random uniform init (dim %d, seed %d)", args.dim, args.seed)
    inputs = [args.docs, args.concepts] + ([args.embeddings] if args.embeddings else [])
    manifest = Manifest("ingest", {"dim": args.dim, "embeddings": source}, inputs, args.seed)
    out = corpus_mod.save_bundle(corpus, args.out, emb, {"manifest": manifest.id, "seed": args.seed})
    log.info("bundle: %d documents, %d concepts, %d vocabulary entries",
             len(corpus.documents), len(corpus.concepts), len(corpus.vocab))
    manifest.write(out)
    return 0


def cmd_build_graph(args) -> int:
    corpus, _ = corpus_mod.load_bundle(args.bundle)
    graph = build_graph(corpus, args.kb)
    manifest = Manifest("build-graph", {}, [args.bundle, args.kb], args.seed)
    save_graph(graph, args.out)
    print(f"containment_edges\t{graph.num_containment_edges}")
    print(f"kb_edges\t{graph.num_kb_edges}")
    manifest.write(args.out)
    return 0


def _train_command(args, stage: str) -> int:
    file_cfg = _file_config(args)
    corpus, emb, graph = _load_inputs(args)
    tcfg = _train_config(args, stage, file_cfg)
    model = _build_model(args, corpus, emb, graph, file_cfg, stage)
    lexicon = load_lexicon(args.lexicon)
    inputs = [args.bundle, args.graph] + [p for p in (args.lexicon, getattr(args, "init", None),
                                                       getattr(args, "queries", None),
                                                       getattr(args, "qrels", None)) if p]
    config = {"model": model.config.to_dict(), "train": tcfg.to_dict()}
    manifest = Manifest(stage, config, inputs, args.seed, stage)
    if stage == "pretrain":
        model, trainer, _ = pretrain(model, tcfg, lexicon, checkpoint_path=args.out,
                                     resume_from=args.resume)
    else:
        topics = read_queries(args.queries)
        model, trainer = finetune(model, topics, read_qrels(args.qrels), tcfg, lexicon,
                                  checkpoint_path=args.out, resume_from=args.resume)
    trainer.save(args.out, {"manifest": manifest.id})
    h = trainer.history
    if h.train_loss:
        log.info("%s finished: epoch %d, final train loss %.6f", stage, trainer.epoch, h.train_loss[-1])
    manifest.write(args.out)
    return 0


def cmd_pretrain(args) -> int:
    return _train_command(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train_command(args, "finetune")


def cmd_rank(args) -> int:
    corpus, _, graph = _load_inputs(args)
    header, params = read_checkpoint_params(args.checkpoint)
    cfg = dict(header["config"])
    cfg.update(_model_overrides(args))
    if args.alpha is not None:
        cfg["alpha"] = args.alpha
    if args.ablate == "reward":
        cfg["alpha"] = 1.0
    model = GraphRankModel(corpus, graph, ModelConfig.from_dict(cfg), params)
    lexicon = load_lexicon(args.lexicon)
    queries = [expand(q, lexicon) for q in read_queries(args.queries)]
    inputs = [args.bundle, args.graph, args.checkpoint, args.queries] + ([args.lexicon] if args.lexicon else [])
    manifest = Manifest("rank", {"model": model.config.to_dict(), "depth": args.depth,
                                 "prefilter": args.prefilter}, inputs, args.seed)
    ranked = model.rank(queries, depth=args.depth, prefilter=args.prefilter)
    write_run(ranked, args.out, tag=f"dcgrank-{manifest.id}")
    manifest.write(args.out)
    return 0


def cmd_eval(args) -> int:
    from .ranker import read_run

    run = read_run(args.run)
    qrels = read_qrels(args.qrels)
    if args.metric:
        name = args.metric.lower()
        if name in ("ndcg", "p"):
            name = f"{name}@{args.n}"
        metrics = (name,)
    else:
        metrics = ("ndcg@20", "map", "mrr", "p@1", f"p@{args.n}" if args.n else "p@10")
    missing = sorted(set(run) - set(qrels))
    if missing:
        log.warning("%d run quer%s without qrels: %s", len(missing), "y" if len(missing) == 1 else "ies",
                    " ".join(missing))
    report = evaluate(run, qrels, metrics, graded_ap=args.graded_ap)
    text = report.to_tsv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        Manifest("eval", {"metrics": list(metrics), "graded_ap": args.graded_ap},
                 [args.run, args.qrels], args.seed).write(args.out)
    else:
        sys.stdout.write(text)
    for reason, count in sorted(report.skipped.items()):
        print(f"skipped\t{reason}\t{count}", file=sys.stderr)
    return 0


def gradcheck_report(corrupt: bool = False, seed: int = 1, eps: float = 1e-5,
                     self_loops: bool = True, alpha_scope: str = "batch"):
    """Finite-difference check of the full objective on the toy fixture.

    Returns ``(max_error, {group: max_error})``.  With ``corrupt`` the
    analytic gradient is sign-flipped, which the check must detect.
    """
    from .dcgraph import build_graph as _build
    from .synthetic import toy_fixture

    data = toy_fixture()
    corpus = data.corpus()
    graph = _build(corpus, data.kb_edges)
    lexicon = data.lexicon()
    queries = {q.id: expand(q, lexicon) for q in data.queries}
    config = ModelConfig(emb_dim=4, enc_hidden=2, enc_layers=3, gcn_dim=3, doc_dim=4, dec_hidden=3,
                         cnn_filters=3, margin=2.0, self_loops=self_loops, alpha_scope=alpha_scope)
    model = GraphRankModel.create(corpus, graph, config, seed=seed)
    pairs = [TrainPair("p1", "d1", "d2"), TrainPair("p1", "d3", "d5"),
             TrainPair("p2", "d2", "d1"), TrainPair("p2", "d4", "d3")]

    def objective(params):
        loss = model.objective(pairs, queries, rng=np.random.default_rng(seed + 4)).loss
        if corrupt:
            for name in params.names():
                params.grad(name)[...] *= -1.0
        return loss

    return grad_check(objective, model.params, eps, coords=model.trainable_coords(), per_group=True)


def cmd_gradcheck(args) -> int:
    worst, groups = gradcheck_report(corrupt=args.corrupt, seed=args.seed)
    for name in sorted(groups):
        status = "ok" if groups[name] < GRADCHECK_TOL else "FAIL"
        print(f"{name}\t{groups[name]:.3e}\t{status}")
    passed = worst < GRADCHECK_TOL
    print(f"max_rel_error\t{worst:.3e}\t{'PASS' if passed else 'FAIL'}")
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _shared() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="INI file with [model] and [train] sections")
    p.add_argument("--ablate", choices=("graph", "reward"))
    p.add_argument("--norm", choices=("l1", "l2"))
    p.add_argument("--margin", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--graded-ap", action="store_true")
    p.add_argument("--paranoid", action="store_true", help="finite-difference spot checks while training")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcgrank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[_shared()], help="compile corpus files into a bundle")
    p.add_argument("--docs", required=True)
    p.add_argument("--concepts", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-graph", parents=[_shared()], help="build the document-concept graph")
    p.add_argument("--bundle", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graph)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, parents=[_shared()], help=f"{name} stage")
        p.add_argument("--bundle", required=True)
        p.add_argument("--graph", required=True)
        p.add_argument("--lexicon")
        p.add_argument("--out", required=True)
        p.add_argument("--resume", help="checkpoint to continue from")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        if name == "finetune":
            p.add_argument("--init", help="checkpoint providing the starting parameters")
            p.add_argument("--queries", required=True)
            p.add_argument("--qrels", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("rank", parents=[_shared()], help="write a TREC run file")
    p.add_argument("--bundle", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--depth", type=int, default=1000)
    p.add_argument("--prefilter", type=int, help="score only the top K documents by concept overlap")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", parents=[_shared()], help="score a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metric", help="ndcg, map, mrr or p (with --n), or e.g. ndcg@20")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[_shared()], help="finite-difference check on the toy model")
    p.add_argument("--corrupt", action="store_true", help="sign-flip the analytic gradient")
    p.set_defaults(func=cmd_gradcheck, seed=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "eval" and args.metric and args.metric.lower() in ("ndcg", "p") and args.n is None:
        args.n = 20 if args.metric.lower() == "ndcg" else 10
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
