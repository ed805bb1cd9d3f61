import json
from dataclasses import replace

import numpy as np
import pytest

from adapter_splade.autodiff import ContractError, Tape
from adapter_splade import autodiff as ad
from adapter_splade.checkpoint import load_checkpoint
from adapter_splade.data import TrainingExample
from adapter_splade.encoder import AdapterConfig, EncoderConfig, count_params
from adapter_splade.index import build_index
from adapter_splade.objectives import RegularizerConfig
from adapter_splade.sparse import SparseVector
from adapter_splade.trainer import (
    ABLATION_COLUMNS,
    CheckpointRecord,
    SpladeTrainer,
    TrainConfig,
    TrainingError,
    adapt_domain,
    build_model,
    format_table,
    learning_rate_at,
    mine_hard_negatives,
    run_ablation_suite,
    run_loop,
    select_best,
)

NO_REG = RegularizerConfig(lambda_q=0.0, lambda_d=0.0, ramp_steps=0)


def small_config(task, layers=2):
    return EncoderConfig(num_layers=layers, hidden_dim=16, num_heads=2, ffn_dim=32,
                         vocab_size=len(task.tokenizer()), max_seq_len=32)


def make_trainer(task, cfg=None, reg=NO_REG, adapters=None, **train_kw):
    train = TrainConfig(**{"learning_rate": 1e-2, "batch_size": 4, "iterations": 4, "warmup_steps": 0,
                           "eval_every": 2, **train_kw})
    model = build_model(cfg or small_config(task), train, adapters or AdapterConfig(reduction_factor=4))
    return SpladeTrainer(model, task.tokenizer(), task.collection, task.all_queries(), train, reg)


class TestSchedule:
    def test_warmup_then_linear_decay(self):
        cfg = TrainConfig(learning_rate=1.0, iterations=10, warmup_steps=2)
        assert [learning_rate_at(s, cfg) for s in (0, 1)] == [0.5, 1.0]
        assert learning_rate_at(2, cfg) == 1.0
        assert learning_rate_at(6, cfg) == pytest.approx(0.5)
        assert learning_rate_at(10, cfg) == 0.0

    def test_constant(self):
        cfg = TrainConfig(learning_rate=0.1, iterations=10, warmup_steps=0, schedule="constant")
        assert {learning_rate_at(s, cfg) for s in range(10)} == {0.1}

    def test_epoch_cap(self):
        cfg = TrainConfig(iterations=1000, batch_size=8, epochs=2)
        assert cfg.total_steps(20) == 5
        assert TrainConfig(iterations=3, epochs=10).total_steps(100) == 3

    @pytest.mark.parametrize("kw", [{"learning_rate": -1}, {"batch_size": 0}, {"mode": "pairs"},
                                    {"encoder_mode": "partial"}, {"schedule": "cosine"}, {"epochs": 0},
                                    {"dropout": 1.0}, {"dropout": -0.1}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestSelectBest:
    def test_argmax(self):
        recs = [CheckpointRecord(0, 0.1), CheckpointRecord(5, 0.7), CheckpointRecord(10, 0.4)]
        assert select_best(recs).step == 5

    def test_tie_earliest(self):
        recs = [CheckpointRecord(0, 0.2), CheckpointRecord(5, 0.6), CheckpointRecord(10, 0.6)]
        assert select_best(recs).step == 5

    def test_empty(self):
        with pytest.raises(ContractError):
            select_best([])

    def test_mrr_range(self):
        with pytest.raises(ValueError):
            CheckpointRecord(0, 1.5)


class TestRunLoop:
    def _store(self):
        from adapter_splade.params import ParameterStore

        s = ParameterStore()
        s.add("w", np.zeros(1))
        return s

    def test_injected_metrics_restore_best(self):
        store = self._store()
        curve = iter([0.1, 0.3, 0.9, 0.2, 0.5])

        def step_fn(idx, step, lr):
            store.values["w"] += 1.0
            return {}

        cfg = TrainConfig(iterations=8, eval_every=2, batch_size=1)
        best, recs = run_loop(store, cfg, 3, step_fn, lambda: next(curve))
        assert [r.step for r in recs] == [0, 2, 4, 6, 8]
        assert best.step == 4 and best.mrr == 0.9
        assert store["w"][0] == 4.0

    def test_final_eval_when_not_multiple(self):
        store = self._store()
        cfg = TrainConfig(iterations=5, eval_every=3, batch_size=1, eval_at_start=False)
        _, recs = run_loop(store, cfg, 2, lambda i, s, lr: {}, lambda: 0.5)
        assert [r.step for r in recs] == [3, 5]

    def test_each_epoch_visits_every_example(self):
        store = self._store()
        seen = []
        cfg = TrainConfig(iterations=100, batch_size=2, epochs=2, eval_every=100)
        run_loop(store, cfg, 6, lambda idx, s, lr: seen.append(idx.tolist()) or {}, lambda: 0.0)
        flat = sum(seen, [])
        assert len(seen) == 6
        assert sorted(flat[:6]) == list(range(6)) and sorted(flat[6:]) == list(range(6))

    def test_no_examples(self):
        with pytest.raises(ContractError):
            run_loop(self._store(), TrainConfig(), 0, lambda *a: {}, lambda: 0.0)


class TestTrainStep:
    def test_zero_learning_rate_is_noop(self, small_task):
        tr = make_trainer(small_task)
        before = tr.model.store.copy()
        tr.train_step(small_task.triplets[:4], 0, lr=0.0)
        assert tr.model.store.equals(before)

    def test_loss_decreases_on_repeated_example(self, small_task):
        tr = make_trainer(small_task, in_batch="none")
        batch = small_task.triplets[:1]
        losses = [tr.train_step(batch, s, lr=1e-4)["loss"] for s in range(11)]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_frozen_parameters_bit_identical(self, small_task):
        tr = make_trainer(small_task, reg=RegularizerConfig(lambda_q=1e-2, lambda_d=1e-2, ramp_steps=2))
        before = tr.model.store.copy()
        for s in range(6):
            tr.train_step(small_task.triplets[4 * s : 4 * s + 4], s)
        frozen = [n for n in before.names() if not tr.model.store.trainable[n]]
        assert frozen
        for n in frozen:
            assert np.array_equal(tr.model.store[n], before[n])
        moved = [n for n in tr.model.store.trainable_names() if not np.array_equal(tr.model.store[n], before[n])]
        assert moved

    def test_logged_values(self, small_task):
        tr = make_trainer(small_task, reg=RegularizerConfig(lambda_q=0.4, lambda_d=0.2, ramp_steps=10))
        info = tr.train_step(small_task.triplets[:4], 5)
        assert info["lambda_q"] == pytest.approx(0.1) and info["lambda_d"] == pytest.approx(0.05)
        assert info["loss"] >= info["task_loss"]

    def test_non_finite_aborts_with_batch_ids(self, small_task):
        tr = make_trainer(small_task)
        tr.model.store.values["head.vocab_bias"][:] = np.nan
        ex = small_task.triplets[0]
        with pytest.raises(TrainingError, match=ex.qid):
            tr.train_step([ex], 0)

    def test_distill_needs_teacher(self, small_task):
        tr = make_trainer(small_task, mode="distill")
        with pytest.raises(ContractError):
            tr.train_step(small_task.triplets[:2], 0)
        info = tr.train_step(small_task.teacher_triplets[:2], 0)
        assert np.isfinite(info["loss"])

    def test_unknown_id(self, small_task):
        tr = make_trainer(small_task)
        with pytest.raises(KeyError, match="nope"):
            tr.train_step([TrainingExample("nope", "x", "y")], 0)

    def test_bi_adapter_routing(self, small_task):
        tr = make_trainer(small_task, bi_adapter=True)
        store = tr.model.store
        assert any(n.startswith("adapters.query.") for n in store.trainable_names())
        assert any(n.startswith("adapters.document.") for n in store.trainable_names())
        rng = np.random.default_rng(0)
        for n in store.names():
            if n.endswith("up.weight"):
                store.values[n][...] = rng.normal(0, 0.1, store[n].shape)
        qs = [tr._tokens("q", small_task.triplets[0].qid)]
        with Tape() as tape:
            loss = tr.model.represent(qs, "query").sum()
        grads = ad.backward(tape, loss)
        assert any(n.startswith("adapters.query.") for n in grads)
        assert not any(n.startswith("adapters.document.") for n in grads)

    def test_duplicate_positive_not_a_negative(self, small_task):
        ex = small_task.triplets[0]
        tr = make_trainer(small_task)
        tr.model.store.values["head.vocab_bias"][:] = 0.5
        _, task = tr.batch_loss([ex, ex], 0)
        q = tr.model.represent([tr._tokens("q", ex.qid)], "query").value[0]
        d = tr.model.represent([tr._tokens("d", ex.pos_id), tr._tokens("d", ex.neg_id)]).value
        s_pos, s_neg = q @ d[0], q @ d[1]
        # columns [pos, pos(dup), neg, neg]; the duplicate positive is dropped
        expected = -s_pos + np.log(np.exp(s_pos) + 2 * np.exp(s_neg))
        assert task.value == pytest.approx(expected, rel=1e-12)


class TestTraining:
    def test_deterministic(self, small_task):
        a, b = make_trainer(small_task), make_trainer(small_task)
        ra = a.train(small_task.triplets, small_task.queries["dev"], small_task.qrels["dev"])
        rb = b.train(small_task.triplets, small_task.queries["dev"], small_task.qrels["dev"])
        assert ra == rb and a.records == b.records
        assert a.model.store.equals(b.model.store)

    def test_dropout_seeded(self, small_task):
        a, b = make_trainer(small_task, dropout=0.1), make_trainer(small_task, dropout=0.1)
        batch = small_task.triplets[:4]
        assert a.train_step(batch, 0) == b.train_step(batch, 0)
        assert a.model.store.equals(b.model.store)
        plain = make_trainer(small_task)
        assert plain.train_step(batch, 0)["loss"] != make_trainer(small_task, dropout=0.1).train_step(batch, 0)["loss"]

    def test_artifacts(self, small_task, tmp_path):
        tr = make_trainer(small_task)
        best = tr.train(small_task.triplets, small_task.queries["dev"], small_task.qrels["dev"], tmp_path)
        lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [l["step"] for l in lines if "eval_mrr" in l] == [r.step for r in tr.records]
        assert best.path == str(tmp_path / "best.ckpt")
        store, config, adapters, header = load_checkpoint(best.path)
        assert config == tr.model.config and adapters == tr.model.adapters
        assert header["extra"]["vocab"] == small_task.tokenizer().to_list()
        assert store.equals(tr.model.store)

    def test_needs_dev_queries(self, small_task):
        with pytest.raises(ContractError):
            make_trainer(small_task).train(small_task.triplets, {}, {})


class TestMining:
    def _index(self):
        docs = [("d1", SparseVector.from_pairs([(0, 2.0)])), ("d2", SparseVector.from_pairs([(0, 1.0)])),
                ("d3", SparseVector.from_pairs([(0, 0.5), (1, 1.0)])), ("d4", SparseVector.from_pairs([(2, 1.0)]))]
        return build_index(docs, 3)

    def test_negatives_exclude_relevant(self):
        reps = {"q1": SparseVector.from_pairs([(0, 1.0)])}
        res = mine_hard_negatives(self._index(), reps, {"q1": {"d1": 1}}, depth=3, negatives_per_query=10)
        assert len(res.examples) == 10
        assert {e.neg_id for e in res.examples} <= {"d2", "d3"}
        assert {e.pos_id for e in res.examples} == {"d1"}

    def test_skips(self):
        reps = {"a": SparseVector.from_pairs([(2, 1.0)]), "b": SparseVector.from_pairs([(0, 1.0)])}
        res = mine_hard_negatives(self._index(), reps, {"a": {"d4": 1}}, depth=5)
        assert res.examples == []
        assert res.skipped_no_negative == 1 and res.skipped_no_positive == 1

    def test_depth_limits_pool(self):
        reps = {"q1": SparseVector.from_pairs([(0, 1.0)])}
        res = mine_hard_negatives(self._index(), reps, {"q1": {"d3": 1}}, depth=1, negatives_per_query=5)
        assert {e.neg_id for e in res.examples} == {"d1"}

    def test_deterministic(self):
        reps = {"q1": SparseVector.from_pairs([(0, 1.0), (1, 0.1)])}
        a = mine_hard_negatives(self._index(), reps, {"q1": {"d4": 1}}, 5, 6, seed=3)
        b = mine_hard_negatives(self._index(), reps, {"q1": {"d4": 1}}, 5, 6, seed=3)
        assert a == b


class TestAdaptation:
    def test_zero_rounds(self, small_task):
        train = TrainConfig(encoder_mode="adapter-tune", batch_size=4)
        model = build_model(small_config(small_task), replace(train, encoder_mode="finetune-all"))
        before = model.store.copy()
        results, current = adapt_domain(model, small_task.tokenizer(), small_task, 0, train)
        assert len(results) == 1 and results[0].round == 0
        assert model.store.equals(before)
        assert any(n.startswith("adapters.") for n in current.store.names())

    def test_one_round_keeps_backbone(self, small_task):
        train = TrainConfig(encoder_mode="adapter-tune", batch_size=8, learning_rate=1e-2, warmup_steps=0)
        model = build_model(small_config(small_task), train, AdapterConfig(reduction_factor=4))
        results, current = adapt_domain(model, small_task.tokenizer(), small_task, 1, train,
                                        NO_REG, depth=10, negatives_per_query=1)
        assert [r.round for r in results] == [0, 1]
        assert results[1].examples > 0
        for n in model.store.names():
            if not current.store.trainable[n]:
                assert np.array_equal(current.store[n], model.store[n])

    def test_negative_rounds(self, small_task):
        model = build_model(small_config(small_task), TrainConfig())
        with pytest.raises(ValueError):
            adapt_domain(model, small_task.tokenizer(), small_task, -1, TrainConfig())


class TestAblation:
    def test_rows_and_counts(self, small_task):
        train = TrainConfig(learning_rate=1e-2, batch_size=4, iterations=2, warmup_steps=0, eval_every=2)
        rows = run_ablation_suite(small_config(small_task), AdapterConfig(reduction_factor=4), train,
                                  small_task, ks=[0, 1, 2], regularizer=NO_REG)
        assert [r["k"] for r in rows] == [0, 1, 2]
        assert [r["removed"] for r in rows] == ["none", "0", "0-1"]
        trainable = [r["trainable"] for r in rows]
        assert trainable[0] > trainable[1] > trainable[2]
        table = format_table(rows)
        assert table.splitlines()[0].split("\t") == list(ABLATION_COLUMNS)
        assert len(table.splitlines()) == 4

    def test_k_out_of_range(self, small_task):
        with pytest.raises(ValueError):
            run_ablation_suite(small_config(small_task), AdapterConfig(), TrainConfig(), small_task, ks=[3])

    def test_head_only_count(self, small_task):
        cfg = small_config(small_task)
        model = build_model(cfg, TrainConfig(encoder_mode="head-only"))
        assert count_params(model.store).trainable == 16 * 16 + 3 * 16 + cfg.vocab_size
