import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from adapter_splade.encoder import EncoderConfig, TokenSequence, init_backbone
from adapter_splade.params import ParameterStore
from adapter_splade.sparse import (
    SparseVector,
    SpladeModel,
    format_sparse,
    init_head,
    parse_sparse,
    pool,
    score,
    term_logits,
)


def sparse_vectors(vocab=20):
    return st.dictionaries(st.integers(0, vocab - 1), st.floats(0.01, 10.0), max_size=vocab).map(
        lambda d: SparseVector.from_pairs(d.items())
    )


def _gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


class TestSparseVector:
    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            SparseVector(np.array([3, 1]), np.array([1.0, 1.0]))

    def test_rejects_zero_weight(self):
        with pytest.raises(ValueError):
            SparseVector(np.array([1]), np.array([0.0]))

    def test_text_round_trip(self):
        v = SparseVector.from_pairs([(7, 0.25), (2, 1.5)])
        line = format_sparse("D1", v)
        assert line == "D1\t2:1.500000 7:0.250000"
        assert parse_sparse(line) == ("D1", v)


class TestTermLogits:
    def _store(self, d=4, vocab=3, rng=None):
        cfg = EncoderConfig(num_layers=1, hidden_dim=d, num_heads=1, ffn_dim=4, vocab_size=vocab, max_seq_len=4)
        store = init_backbone(cfg)
        init_head(store, cfg)
        if rng is not None:
            for n in store.names():
                store.values[n][...] = rng.normal(0, 0.5, store[n].shape) + (1.0 if n.endswith("gain") else 0.0)
        return cfg, store

    def test_zero_embeddings_give_bias(self, rng):
        cfg, store = self._store(rng=rng)
        store.values["embeddings.token"][...] = 0.0
        store.values["head.vocab_bias"][...] = 2.5
        out = term_logits(store, rng.normal(size=(3, 4)), cfg).value
        np.testing.assert_array_equal(out, np.full((3, 3), 2.5))

    def test_direct_formula_single_token(self, rng):
        cfg, store = self._store(rng=rng)
        P = store.values
        h = rng.normal(size=4)
        z = [_gelu(v) for v in h @ P["head.transform.weight"] + P["head.transform.bias"]]
        mu = sum(z) / 4
        var = sum((v - mu) ** 2 for v in z) / 4
        t = [(v - mu) / math.sqrt(var + 1e-12) * g + b for v, g, b in zip(z, P["head.ln.gain"], P["head.ln.bias"])]
        expected = [sum(ti * ej for ti, ej in zip(t, P["embeddings.token"][j])) + P["head.vocab_bias"][j] for j in range(3)]
        np.testing.assert_allclose(term_logits(store, h[None], cfg).value[0], expected, atol=1e-12)

    def test_identical_rows(self, rng):
        cfg, store = self._store(rng=rng)
        h = np.tile(rng.normal(size=4), (2, 1))
        out = term_logits(store, h, cfg).value
        np.testing.assert_array_equal(out[0], out[1])

    def test_tying(self, rng):
        # mutate one embedding row: the input embedding and the head logit both move
        cfg, store = self._store(rng=rng)
        model = SpladeModel(cfg, None, store)
        ids, mask = np.array([[1, 2]]), np.ones((1, 2))
        before_logits = model.logits(ids, mask).value.copy()
        before_h = model.encoder.encode_batch(ids, mask, None).value.copy()
        store.values["embeddings.token"][1] += rng.normal(size=4)
        assert not np.allclose(model.encoder.encode_batch(ids, mask, None).value, before_h)
        after = model.logits(ids, mask).value
        assert not np.allclose(after[..., 1], before_logits[..., 1])


class TestPool:
    def test_nonpositive_is_empty(self):
        assert len(pool(-np.abs(np.random.default_rng(0).normal(size=(3, 5))))) == 0

    def test_log_identity_max(self):
        v = pool(np.array([[math.e - 1], [0.5]]))
        assert v.ids.tolist() == [0]
        assert v.weights[0] == pytest.approx(1.0, abs=1e-15)

    def test_loop_oracle(self, rng):
        x = rng.normal(size=(4, 6))
        mask = np.array([1, 1, 0, 1])
        expected = {}
        for j in range(6):
            best = 0.0
            for i in range(4):
                if mask[i]:
                    best = max(best, math.log(1 + max(x[i, j], 0.0)))
            if best > 0:
                expected[j] = best
        v = pool(x, mask)
        assert v.ids.tolist() == sorted(expected)
        np.testing.assert_allclose(v.weights, [expected[j] for j in sorted(expected)], rtol=1e-15)

    def test_all_masked_empty(self, rng):
        assert len(pool(rng.normal(size=(3, 4)), np.zeros(3))) == 0

    @given(hnp.arrays(np.float64, (5, 7), elements=st.floats(-5, 5)), st.permutations(range(5)))
    @settings(max_examples=50, deadline=None)
    def test_permutation_invariance(self, x, perm):
        assert pool(x) == pool(x[list(perm)])

    @given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-5, 5)),
           st.integers(0, 3), st.integers(0, 5), st.floats(0, 3))
    @settings(max_examples=50, deadline=None)
    def test_monotone_saturation(self, x, i, j, bump):
        before = pool(x).to_dense(6)[j]
        y = x.copy()
        y[i, j] += bump
        assert pool(y).to_dense(6)[j] >= before

    @given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-5, 5)),
           hnp.arrays(np.int64, 4, elements=st.integers(0, 1)))
    @settings(max_examples=50, deadline=None)
    def test_support_count(self, x, mask):
        v = pool(x, mask)
        active = mask.astype(bool)
        assert len(v) == int(np.any(x[active] > 0, axis=0).sum())
        assert len(v) <= 6
        assert np.all(v.weights > 0)


class TestScore:
    def test_disjoint(self):
        assert score(SparseVector.from_pairs([(1, 1.0)]), SparseVector.from_pairs([(2, 1.0)])) == 0.0

    def test_hand_value(self):
        assert score(SparseVector.from_pairs([(2, 1.5)]), SparseVector.from_pairs([(2, 2.0)])) == 3.0

    @given(sparse_vectors(), sparse_vectors())
    @settings(max_examples=100, deadline=None)
    def test_dense_oracle_and_symmetry(self, q, d):
        dense = float(q.to_dense(20) @ d.to_dense(20))
        assert score(q, d) == pytest.approx(dense, rel=1e-12, abs=1e-12)
        assert score(q, d) == pytest.approx(score(d, q), rel=1e-15)
        assert score(q, d) >= 0


class TestSpladeModel:
    def test_represent_matches_pool_of_logits(self, tiny_config, rng):
        model = SpladeModel.create(tiny_config, None, seed=0)
        model.store.values["head.vocab_bias"][...] = rng.normal(0, 0.5, tiny_config.vocab_size)
        seqs = [TokenSequence([4, 5, 6]), TokenSequence([7, 8])]
        dense = model.represent(seqs).value
        for row, s in zip(dense, seqs):
            logits = model.logits(np.array([s.ids]), np.ones((1, len(s.ids)))).value[0]
            np.testing.assert_allclose(row, pool(logits).to_dense(tiny_config.vocab_size), atol=1e-12)

    def test_encode_dense_order_restored(self, tiny_config):
        model = SpladeModel.create(tiny_config, None, seed=0)
        model.store.values["head.vocab_bias"][...] = 1.0
        seqs = [TokenSequence([4, 5, 6, 7]), TokenSequence([8]), TokenSequence([9, 10])]
        batched = model.encode_dense(seqs, batch_size=2)
        for row, s in zip(batched, seqs):
            np.testing.assert_allclose(row, model.represent([s]).value[0], atol=1e-12)

    def test_dropout_scales_kept_outputs(self, tiny_config):
        model = SpladeModel.create(tiny_config, None, seed=0)
        seqs = [TokenSequence([4, 5, 6]), TokenSequence([7, 8, 9])]
        got = model.represent(seqs, dropout=0.25, rng=np.random.default_rng(5)).value
        # replay the same mask by hand on the encoder output
        ids, mask = np.array([s.ids for s in seqs]), np.ones((2, 3))
        h = model.encoder.encode_batch(ids, mask, None).value
        keep = np.random.default_rng(5).random(h.shape) >= 0.25
        logits = term_logits(model.store, h * keep / 0.75, tiny_config).value
        for row, lg in zip(got, logits):
            np.testing.assert_allclose(row, pool(lg).to_dense(tiny_config.vocab_size), atol=1e-12)

    def test_dropout_zero_is_default(self, tiny_config):
        model = SpladeModel.create(tiny_config, None, seed=0)
        seqs = [TokenSequence([4, 5, 6])]
        np.testing.assert_array_equal(model.represent(seqs, dropout=0.0, rng=np.random.default_rng(1)).value,
                                      model.represent(seqs).value)
        with pytest.raises(ValueError):
            model.represent(seqs, dropout=1.0)

    def test_empty_store_needs_head(self, tiny_config):
        model = SpladeModel(tiny_config, None, ParameterStore())
        with pytest.raises(KeyError):
            model.represent([TokenSequence([4])])
