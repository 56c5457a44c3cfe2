import logging

import numpy as np
import pytest
from scipy import stats

from dcgrank.dcgraph import build_graph
from dcgrank.model import GraphRankModel, ModelConfig
from dcgrank.numkit import ParamStore
from dcgrank.ranker import TrainPair
from dcgrank.synthetic import containment_fixture, toy_fixture
from dcgrank.trainer import (Adagrad, TrainConfig, Trainer, TrainingError, adagrad_step,
                             finetune, graded_pairs, mesh_pairs, pretrain, ranking_map,
                             read_checkpoint_params, sample_negatives, split_pairs)

SMALL = dict(emb_dim=6, enc_hidden=4, enc_layers=2, gcn_dim=6, doc_dim=6, dec_hidden=6,
             cnn_filters=6)


def small_model(data=None, seed=0, **overrides):
    data = data or containment_fixture(n_docs=20, n_concepts=8, n_queries=4, seed=3)
    corpus = data.corpus()
    cfg = ModelConfig(**{**SMALL, **overrides})
    return GraphRankModel.create(corpus, build_graph(corpus, data.kb_edges), cfg, seed=seed), data


class TestAdagradStep:
    def test_first_step_is_sign(self):
        p, g = np.zeros(3), np.array([2.0, -0.5, 1e-3])
        adagrad_step(p, g, np.zeros(3), lr=0.1)
        assert np.allclose(p, -0.1 * np.sign(g), atol=1e-6)

    def test_zero_grad(self):
        p, acc = np.array([1.0, -2.0]), np.array([0.0, 4.0])
        adagrad_step(p, np.zeros(2), acc, lr=0.1)
        assert p.tolist() == [1.0, -2.0] and acc.tolist() == [0.0, 4.0]

    def test_second_step_smaller(self):
        p, acc, g = np.zeros(1), np.zeros(1), np.array([0.7])
        first = adagrad_step(p, g, acc, 0.1).copy()
        second = adagrad_step(p, g, acc, 0.1)
        # closed form: lr / sqrt(k) for the k-th step with a constant gradient
        assert first[0] == pytest.approx(0.1, rel=1e-7)
        assert second[0] == pytest.approx(0.1 / np.sqrt(2), rel=1e-7)

    def test_steps_non_increasing(self):
        p, acc = np.zeros(4), np.zeros(4)
        g = np.array([0.3, -1.0, 5.0, 1e-2])
        prev = np.full(4, np.inf)
        for _ in range(20):
            step = np.abs(adagrad_step(p, g, acc, 0.05))
            assert np.all(step <= prev)
            prev = step

    def test_momentum_accumulates(self):
        p, acc, vel = np.zeros(1), np.zeros(1), np.zeros(1)
        adagrad_step(p, np.ones(1), acc, 0.1, momentum=0.9, velocity=vel)
        second = adagrad_step(p, np.ones(1), acc, 0.1, momentum=0.9, velocity=vel)
        assert second[0] == pytest.approx(0.9 * 0.1 + 0.1 / np.sqrt(2), rel=1e-7)

    def test_non_finite_gradient(self):
        store = ParamStore({"a": np.zeros(2), "b": np.zeros(1)})
        store.grad("b")[0] = np.nan
        opt = Adagrad(store, 0.1)
        with pytest.raises(TrainingError, match="b"):
            opt.step(store)
        assert not store["a"].any()

    def test_frozen_untouched(self):
        store = ParamStore({"a": np.zeros(2), "b": np.zeros(2)})
        store.grad("a")[...] = 1.0
        store.grad("b")[...] = 1.0
        Adagrad(store, 0.1).step(store, frozen={"a"})
        assert not store["a"].any() and np.all(store["b"] < 0)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(dropout=1.0), dict(alpha=0.9),
                                     dict(stage="warmup")])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.epochs, c.dropout, c.alpha, c.momentum) == (0.001, 50, 0.5, 1.6, 0.9)


class TestNegativeSampling:
    def test_forced(self):
        out = sample_negatives([("q", "d1")] * 20, ["d1", "d2"], seed=5)
        assert {neg for _, _, neg in out} == {"d2"}

    def test_deterministic(self):
        pos = [("q", f"d{i % 5}") for i in range(50)]
        docs = [f"d{i}" for i in range(5)]
        assert sample_negatives(pos, docs, 9) == sample_negatives(pos, docs, 9)
        assert sample_negatives(pos, docs, 9) != sample_negatives(pos, docs, 10)

    def test_uniform(self):
        docs = [f"d{i}" for i in range(5)]
        out = sample_negatives([("q", "d2")] * 10000, docs, seed=0)
        counts = np.array([sum(neg == d for _, _, neg in out) for d in docs if d != "d2"])
        expected = 10000 / 4
        sigma = np.sqrt(10000 * 0.25 * 0.75)
        assert np.all(np.abs(counts - expected) < 3 * sigma)
        assert stats.chisquare(counts).pvalue > 0.001

    def test_corpus_of_one(self):
        with pytest.raises(TrainingError):
            sample_negatives([("q", "d1")], ["d1"], 0)


class TestPairs:
    def test_graded_pairs_respect_grades(self):
        judged = {"a": 2, "b": 1}
        pairs = graded_pairs("q", judged, ["a", "b", "c", "d"], 100, np.random.default_rng(0))
        # a beats b, c, d; b beats c, d
        assert sorted((p.better, p.worse) for p in pairs) == [
            ("a", "b"), ("a", "c"), ("a", "d"), ("b", "c"), ("b", "d")]

    def test_graded_pairs_limit(self):
        judged = {f"d{i}": 1 for i in range(5)}
        docs = [f"d{i}" for i in range(20)]
        pairs = graded_pairs("q", judged, docs, 7, np.random.default_rng(1))
        assert len(pairs) == 7 and len(set(pairs)) == 7
        assert all(judged.get(p.better, 0) > judged.get(p.worse, 0) for p in pairs)

    def test_split_ratio(self):
        train, val, test = split_pairs(list(range(100)), seed=0)
        assert (len(train), len(val), len(test)) == (80, 10, 10)
        assert sorted(train + val + test) == list(range(100))

    def test_mesh_pairs(self):
        data = toy_fixture()
        queries, pairs = mesh_pairs(data.corpus(), None, seed=0)
        assert len(pairs) == 5
        assert queries["mesh:d1"].mesh == ("leukemia",)
        assert all(p.query_id == f"mesh:{p.better}" and p.better != p.worse for p in pairs)

    def test_missing_mesh(self):
        data = toy_fixture()
        data.records[2]["mesh"] = []
        with pytest.raises(TrainingError, match="d3"):
            mesh_pairs(data.corpus(), None, 0)


FAST = dict(learning_rate=0.01, batch_size=8, dropout=0.0)


class TestPretrain:
    def test_loss_decreases(self):
        model, _ = small_model()
        _, trainer, split = pretrain(model, TrainConfig(epochs=50, **FAST))
        h = trainer.history
        assert len(h.train_loss) == 50 and h.train_loss[0] > h.train_loss[-1]
        assert len(split["train"]) == 16

    def test_gamma_zero_is_decoder_only(self):
        model, _ = small_model(gamma=0.0)
        before = model.params.copy()
        pretrain(model, TrainConfig(epochs=2, select_best=False, **FAST))
        for name in ("rank.W", "qcnn.w2.K", "qcnn.w3.K", "qcnn.out.W", "qcnn.out.b"):
            assert np.array_equal(model.params[name], before[name]), name
        assert not np.array_equal(model.params["dec.out.W"], before["dec.out.W"])

    def test_deterministic_checkpoints(self, tmp_path):
        for k in range(2):
            model, _ = small_model()
            pretrain(model, TrainConfig(epochs=3, **FAST), checkpoint_path=tmp_path / f"run{k}")
        assert (tmp_path / "run0").read_bytes() == (tmp_path / "run1").read_bytes()

    def test_resume_matches(self, tmp_path):
        cfg = TrainConfig(epochs=6, checkpoint_every=3, **FAST, momentum=0.9)
        model, _ = small_model()
        _, full, _ = pretrain(model, cfg, checkpoint_path=tmp_path / "ck")
        fresh, _ = small_model()
        _, resumed, _ = pretrain(fresh, cfg, resume_from=tmp_path / "ck.epoch3")
        assert np.max(np.abs(np.subtract(full.history.train_loss, resumed.history.train_loss))) <= 1e-10
        assert np.array_equal(model.params.flat(), fresh.params.flat())

    def test_checkpoint_params(self, tmp_path):
        model, _ = small_model()
        pretrain(model, TrainConfig(epochs=1, **FAST), checkpoint_path=tmp_path / "ck")
        header, params = read_checkpoint_params(tmp_path / "ck")
        assert header["stage"] == "pretrain" and header["epoch"] == 1
        assert np.array_equal(params.flat(), model.params.flat())


class TestFinetune:
    def test_map_increases(self):
        model, data = small_model()
        before = ranking_map(model, data.queries, data.qrels)
        finetune(model, data.queries, data.qrels,
                 TrainConfig(epochs=30, pairs_per_query=32, **FAST))
        assert ranking_map(model, data.queries, data.qrels) > before

    def test_empty_topics(self):
        model, data = small_model()
        before = model.params.flat()
        finetune(model, [], data.qrels, TrainConfig(epochs=3, **FAST))
        assert np.array_equal(model.params.flat(), before)

    def test_deterministic(self, tmp_path):
        for k in range(2):
            model, data = small_model()
            finetune(model, data.queries, data.qrels, TrainConfig(epochs=2, **FAST),
                     checkpoint_path=tmp_path / f"ft{k}")
        assert (tmp_path / "ft0").read_bytes() == (tmp_path / "ft1").read_bytes()

    def test_topic_without_relevant_excluded(self, caplog):
        model, data = small_model()
        qrels = dict(data.qrels)
        qrels[data.queries[0].id] = {}
        with caplog.at_level(logging.WARNING):
            _, trainer = finetune(model, data.queries, qrels, TrainConfig(epochs=1, **FAST))
        assert f"topic {data.queries[0].id} has no relevant document" in caplog.text
        assert len(trainer.history.train_loss) == 1


class TestTrainingMode:
    def test_dropout_only_with_rng(self):
        model, data = small_model(dropout=0.5)
        corpus = model.corpus
        queries, pairs = mesh_pairs(corpus, None, 0)
        batch = pairs[:6]
        eval_a = model.objective(batch, queries, None, backward=False).loss
        eval_b = model.objective(batch, queries, None, backward=False).loss
        train = model.objective(batch, queries, np.random.default_rng(0), backward=False).loss
        assert eval_a == eval_b and train != eval_a

    def test_paranoid_passes(self):
        model, _ = small_model()
        _, trainer, _ = pretrain(model, TrainConfig(epochs=2, paranoid=True, paranoid_every=1, **FAST))
        assert trainer.steps == 4

    def test_paranoid_catches_bad_gradient(self):
        model, _ = small_model()
        original = model.objective

        def corrupted(pairs, queries, rng=None, backward=True):
            res = original(pairs, queries, rng, backward)
            if backward:
                for n in model.params.names():
                    model.params.grad(n)[...] *= 3.0
                    model.params.grad(n)[...] += 0.5
            return res
        model.objective = corrupted
        with pytest.raises(TrainingError, match="spot check"):
            pretrain(model, TrainConfig(epochs=1, paranoid=True, paranoid_every=1, **FAST))

    def test_trainer_sets_alpha_and_dropout(self):
        model, _ = small_model()
        Trainer(model, TrainConfig(alpha=1.0, dropout=0.25))
        assert model.config.alpha == 1.0 and model.config.dropout == 0.25

    def test_self_pair_never_generated(self):
        model, _ = small_model()
        _, pairs = mesh_pairs(model.corpus, None, 4)
        assert all(isinstance(p, TrainPair) and p.better != p.worse for p in pairs)
