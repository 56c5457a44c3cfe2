import json
import logging

import pytest

from dcgrank.cli import gradcheck_report, main, read_config
from dcgrank.ranker import parse_run
from dcgrank.synthetic import toy_fixture

MODEL_INI = """[model]
enc_hidden = 3
enc_layers = 2
gcn_dim = 4
doc_dim = 4
dec_hidden = 4
cnn_filters = 4
dropout = 0.0

[train]
learning_rate = 0.01
batch_size = 2
dropout = 0.0
pairs_per_query = 4
checkpoint_every = 2
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def files(tmp_path):
    data = toy_fixture()
    data.records.append(dict(data.records[2], id="d0"))
    paths = data.write(tmp_path / "data")
    paths["config"] = tmp_path / "model.ini"
    paths["config"].write_text(MODEL_INI)
    paths["bundle"] = tmp_path / "bundle"
    paths["graph"] = tmp_path / "graph.json"
    return paths


@pytest.fixture
def built(files):
    assert run("ingest", "--docs", files["docs"], "--concepts", files["concepts"], "--dim", 4,
               "--out", files["bundle"]) == 0
    assert run("build-graph", "--bundle", files["bundle"], "--kb", files["kb"],
               "--out", files["graph"]) == 0
    return files


def train(files, out, *extra, stage="pretrain", epochs=4):
    args = [stage, "--bundle", files["bundle"], "--graph", files["graph"], "--config", files["config"],
            "--lexicon", files["lexicon"], "--epochs", epochs, "--out", out, *extra]
    if stage == "finetune":
        args += ["--queries", files["queries"], "--qrels", files["qrels"]]
    return run(*args)


class TestIngest:
    def test_counts_logged(self, files, caplog):
        with caplog.at_level(logging.INFO):
            assert run("ingest", "--docs", files["docs"], "--concepts", files["concepts"],
                       "--dim", 4, "--seed", 7, "--out", files["bundle"]) == 0
        assert "bundle: 6 documents, 4 concepts" in caplog.text
        assert "random uniform init (dim 4, seed 7)" in caplog.text
        manifest = json.loads((files["bundle"] / "manifest.json").read_text())
        assert manifest["seed"] == 7 and manifest["command"] == "ingest"

    def test_duplicate_id(self, files, caplog):
        lines = files["docs"].read_text().splitlines()
        files["docs"].write_text("\n".join(lines + lines[:1]) + "\n")
        assert run("ingest", "--docs", files["docs"], "--concepts", files["concepts"],
                   "--out", files["bundle"]) != 0
        assert "d1" in caplog.text

    def test_pretrained_embeddings(self, files, tmp_path):
        emb = tmp_path / "emb.txt"
        emb.write_text("leukemia 0.1 0.2 0.3 0.4\n")
        assert run("ingest", "--docs", files["docs"], "--concepts", files["concepts"], "--dim", 4,
                   "--embeddings", emb, "--out", files["bundle"]) == 0


class TestBuildGraph:
    def test_counts(self, built, capsys):
        assert run("build-graph", "--bundle", built["bundle"], "--kb", built["kb"],
                   "--out", built["graph"]) == 0
        # d1:2, d2:2, d3:1, d4:2, d5:0, d0:1 containment edges; two kb lines
        assert capsys.readouterr().out.splitlines() == ["containment_edges\t8", "kb_edges\t2"]

    def test_unknown_concept(self, built):
        built["kb"].write_text("c1\trelated_to\tc99\n")
        assert run("build-graph", "--bundle", built["bundle"], "--kb", built["kb"],
                   "--out", built["graph"]) != 0

    def test_empty_kb(self, built, capsys):
        built["kb"].write_text("")
        assert run("build-graph", "--bundle", built["bundle"], "--kb", built["kb"],
                   "--out", built["graph"]) == 0
        assert "kb_edges\t0" in capsys.readouterr().out


class TestTraining:
    def test_ablations_distinct(self, built, tmp_path):
        outs = {}
        for mode in ("none", "graph", "reward"):
            outs[mode] = tmp_path / f"ck.{mode}"
            extra = () if mode == "none" else ("--ablate", mode)
            assert train(built, outs[mode], *extra, epochs=2) == 0
        blobs = {m: p.read_bytes() for m, p in outs.items()}
        assert len(set(blobs.values())) == 3

    def test_deterministic(self, built, tmp_path):
        for k in range(2):
            assert train(built, tmp_path / f"ck{k}", epochs=2) == 0
        assert (tmp_path / "ck0").read_bytes() == (tmp_path / "ck1").read_bytes()

    def test_resume_reproduces(self, built, tmp_path):
        assert train(built, tmp_path / "full") == 0
        assert train(built, tmp_path / "resumed", "--resume", tmp_path / "full.epoch2") == 0
        from dcgrank.numkit import read_records
        h_full, r_full = read_records(tmp_path / "full")
        h_res, r_res = read_records(tmp_path / "resumed")
        assert h_full["history"] == h_res["history"]
        assert all((r_full[k] == r_res[k]).all() for k in r_full)

    def test_finetune_from_init(self, built, tmp_path):
        assert train(built, tmp_path / "pre", epochs=2) == 0
        assert train(built, tmp_path / "ft", "--init", tmp_path / "pre", stage="finetune",
                     epochs=2) == 0
        manifest = json.loads((tmp_path / "ft.manifest.json").read_text())
        assert manifest["stage"] == "finetune"

    def test_bad_config_section(self, built, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[optimizer]\nlr = 1\n")
        with pytest.raises(RuntimeError):
            read_config(bad)
        assert train(built, tmp_path / "x", "--config", bad) != 0


class TestRankEval:
    @pytest.fixture
    def checkpoint(self, built, tmp_path):
        assert train(built, tmp_path / "ck", epochs=2) == 0
        return tmp_path / "ck"

    def rank(self, built, checkpoint, out):
        return run("rank", "--bundle", built["bundle"], "--graph", built["graph"], "--checkpoint",
                   checkpoint, "--queries", built["queries"], "--lexicon", built["lexicon"],
                   "--out", out)

    def test_run_strict_and_deterministic(self, built, checkpoint, tmp_path):
        assert self.rank(built, checkpoint, tmp_path / "run1") == 0
        assert self.rank(built, checkpoint, tmp_path / "run2") == 0
        text = (tmp_path / "run1").read_text()
        assert text == (tmp_path / "run2").read_text()
        run_ = parse_run(text.splitlines(), strict=True)
        assert sorted(run_) == ["p1", "p2"]
        for entries in run_.values():
            assert len(entries) == 6
        lines = [line.split() for line in text.splitlines()]
        assert [int(f[3]) for f in lines if f[0] == "p1"] == list(range(1, 7))

    def test_tie_is_id_ascending(self, built, checkpoint, tmp_path):
        # d0 is an exact copy of d3 so the two always tie
        self.rank(built, checkpoint, tmp_path / "run")
        for entries in parse_run((tmp_path / "run").read_text().splitlines()).values():
            docs = [d for d, _ in entries]
            scores = dict(entries)
            assert scores["d0"] == scores["d3"]
            assert docs.index("d0") + 1 == docs.index("d3")

    def test_prefilter(self, built, checkpoint, tmp_path):
        assert run("rank", "--bundle", built["bundle"], "--graph", built["graph"], "--checkpoint",
                   checkpoint, "--queries", built["queries"], "--prefilter", 2, "--out",
                   tmp_path / "run") == 0
        pools = {q: {d for d, _ in r} for q, r in parse_run((tmp_path / "run").read_text().splitlines()).items()}
        # p1 matches c1 and c2: d1 has both; d0, d3, d4 have one each, d0 first by id
        # p2 matches c3 and c4: d2 has both, d4 one
        assert pools == {"p1": {"d1", "d0"}, "p2": {"d2", "d4"}}

    def test_eval_hand_values(self, tmp_path, capsys):
        (tmp_path / "run").write_text("q Q0 a 1 -0.1 t\nq Q0 b 2 -0.2 t\nq Q0 c 3 -0.3 t\n")
        (tmp_path / "qrels").write_text("q 0 a 1\nq 0 c 1\n")
        assert run("eval", "--run", tmp_path / "run", "--qrels", tmp_path / "qrels") == 0
        rows = {tuple(line.split("\t")[:2]): float(line.split("\t")[2])
                for line in capsys.readouterr().out.splitlines()[1:]}
        assert rows[("all", "ndcg@20")] == pytest.approx(0.919721, abs=1e-6)
        assert rows[("all", "map")] == pytest.approx(0.833333, abs=1e-6)
        assert rows[("all", "mrr")] == 1.0 and rows[("all", "p@1")] == 1.0
        assert rows[("all", "p@10")] == pytest.approx(0.2)

    def test_single_metric(self, tmp_path, capsys):
        (tmp_path / "run").write_text("q Q0 a 1 -0.1 t\n")
        (tmp_path / "qrels").write_text("q 0 a 1\n")
        assert run("eval", "--run", tmp_path / "run", "--qrels", tmp_path / "qrels",
                   "--metric", "ndcg", "--n", 20) == 0
        assert {line.split("\t")[1] for line in capsys.readouterr().out.splitlines()[1:]} == {"ndcg@20"}

    def test_mismatched_ids(self, tmp_path, capsys, caplog):
        (tmp_path / "run").write_text("q Q0 a 1 -0.1 t\nz Q0 a 1 -0.1 t\n")
        (tmp_path / "qrels").write_text("q 0 a 1\n")
        assert run("eval", "--run", tmp_path / "run", "--qrels", tmp_path / "qrels",
                   "--out", tmp_path / "report.tsv") == 0
        assert "1 run query without qrels: z" in caplog.text
        assert "skipped\tunjudged\t1" in capsys.readouterr().err
        assert (tmp_path / "report.tsv.manifest.json").exists()

    def test_malformed_run(self, tmp_path):
        (tmp_path / "run").write_text("q Q0 a one -0.1 t\n")
        (tmp_path / "qrels").write_text("q 0 a 1\n")
        assert run("eval", "--run", tmp_path / "run", "--qrels", tmp_path / "qrels") != 0


class TestGradcheck:
    def test_passes_with_group_lines(self, capsys):
        assert run("gradcheck") == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[-1].startswith("max_rel_error") and lines[-1].endswith("PASS")
        groups = {line.split("\t")[0] for line in lines[:-1]}
        assert {"embedding", "rank.W", "gcn.l0.Wd", "dec.out.W", "qcnn.w2.K"} <= groups

    def test_corrupt_fails(self, capsys):
        assert run("gradcheck", "--corrupt") == 1
        assert capsys.readouterr().out.splitlines()[-1].endswith("FAIL")

    def test_variants(self):
        assert gradcheck_report(self_loops=False)[0] < 1e-4
        assert gradcheck_report(alpha_scope="query")[0] < 1e-4
