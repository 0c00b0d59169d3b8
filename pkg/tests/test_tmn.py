import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdr.cf_models import ItemPop
from xdr.serialization import FormatError
from xdr.tensor_core import finite_difference_check
from xdr.tmn import (
    MemoryKeys,
    ReviewSets,
    TextMemoryNetwork,
    TextualFeatures,
    attention_weights,
    export_features,
    import_features,
    materialize,
    textual_feature,
    tmn_gradients,
    tmn_loss,
    tmn_loss_and_gradients,
    tmn_predict,
)


def keys_2d(P, Q, T):
    return MemoryKeys(np.array(P, float), np.array(Q, float), np.array(T, float))


class TestAttention:
    def test_zero_key_is_uniform(self):
        keys = keys_2d([[0, 0]], [[0, 0]], [[1, 2], [3, 4], [5, 6]])
        a = attention_weights("user", 0, keys, ReviewSets([[0, 1, 2]]))
        assert a == pytest.approx({0: 1 / 3, 1: 1 / 3, 2: 1 / 3})

    def test_single_word(self):
        keys = keys_2d([[3, -1]], [[0, 0]], [[1, 2], [3, 4]])
        assert attention_weights("user", 0, keys, ReviewSets([[1]])) == {1: 1.0}

    def test_hand_evaluated(self):
        keys = keys_2d([[1, 0]], [[0, 0]], [[5, 0], [0, 5]])
        a = attention_weights("user", 0, keys, ReviewSets([[0, 1]]))
        e5 = math.exp(5)
        assert a[0] == pytest.approx(e5 / (e5 + 1), abs=1e-12)
        assert a[0] == pytest.approx(0.99331, abs=1e-5) and a[1] == pytest.approx(0.00669, abs=1e-5)

    def test_empty_set(self):
        keys = keys_2d([[1, 0]], [[0, 0]], [[5, 0]])
        assert attention_weights("user", 0, keys, ReviewSets([[]])) == {}

    def test_bad_side(self):
        keys = keys_2d([[1, 0]], [[0, 0]], [[5, 0]])
        with pytest.raises(ValueError):
            attention_weights("word", 0, keys, ReviewSets([[0]]))

    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.floats(-20, 20))
    @settings(max_examples=30)
    def test_shift_invariance(self, pu, c):
        T = np.array([[1.0, 0.5], [-2.0, 0.3], [0.2, 0.2]])
        base = attention_weights("user", 0, keys_2d([pu], [[0, 0]], T), ReviewSets([[0, 1, 2]]))
        # an extra key column paired with a constant word-key column shifts every logit by c
        shifted = keys_2d([pu + [c]], [[0, 0, 0]], np.hstack([T, np.ones((3, 1))]))
        other = attention_weights("user", 0, shifted, ReviewSets([[0, 1, 2]]))
        for w in base:
            assert other[w] == pytest.approx(base[w], abs=1e-12)


class TestTextualFeature:
    def test_identical_rows(self):
        S = np.tile([0.3, -1.2, 2.0], (4, 1))
        keys = keys_2d([[0.7, -0.4]], [[0, 0]], np.random.default_rng(0).normal(size=(4, 2)))
        np.testing.assert_allclose(textual_feature("user", 0, keys, ReviewSets([[0, 1, 3]]), S), S[0])

    def test_uniform_weights(self):
        keys = keys_2d([[0, 0]], [[0, 0]], [[1, 1], [2, 2]])
        out = textual_feature("user", 0, keys, ReviewSets([[0, 1]]), np.eye(2))
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_hand_evaluated(self):
        keys = keys_2d([[1, 0]], [[0, 0]], [[5, 0], [0, 5]])
        out = textual_feature("user", 0, keys, ReviewSets([[0, 1]]), np.eye(2))
        np.testing.assert_allclose(out, [0.99331, 0.00669], atol=1e-5)

    def test_empty_gives_zero(self):
        keys = keys_2d([[1, 0]], [[0, 0]], [[5, 0]])
        np.testing.assert_array_equal(textual_feature("user", 0, keys, ReviewSets([[]]), np.ones((1, 3))),
                                      np.zeros(3))

    @given(st.integers(1, 8), st.integers(0, 1000))
    @settings(max_examples=40)
    def test_convex_combination_and_set_semantics(self, n, seed):
        rng = np.random.default_rng(seed)
        H = 10
        words = rng.choice(H, size=n, replace=False)
        S = rng.normal(size=(H, 4))
        keys = MemoryKeys(rng.normal(size=(1, 3)), np.zeros((1, 3)), rng.normal(size=(H, 3)))
        e = textual_feature("user", 0, keys, ReviewSets([words]), S)
        a = attention_weights("user", 0, keys, ReviewSets([words]))
        assert abs(sum(a.values()) - 1) < 1e-9 and min(a.values()) >= 0
        np.testing.assert_allclose(e, sum(a[w] * S[w] for w in a), atol=1e-12)
        assert np.all(e <= S[words].max(axis=0) + 1e-12) and np.all(e >= S[words].min(axis=0) - 1e-12)
        # permutation and duplication of the word list leave the feature unchanged
        shuffled = np.concatenate([rng.permutation(words), words[:1]])
        np.testing.assert_allclose(textual_feature("user", 0, keys, ReviewSets([shuffled]), S), e, atol=1e-15)


class TestPredict:
    def test_empty_user_is_half(self):
        keys = keys_2d([[1, 0]], [[0, 1]], [[1, 1], [2, 0]])
        assert tmn_predict(0, 0, keys, ReviewSets([[]]), ReviewSets([[0, 1]]), np.eye(2)) == 0.5

    def test_orthogonal(self):
        keys = keys_2d([[0, 0]], [[0, 0]], [[0, 0], [0, 0]])
        assert tmn_predict(0, 0, keys, ReviewSets([[0]]), ReviewSets([[1]]), np.eye(2)) == 0.5

    def test_dot_two(self):
        S = np.array([[2.0, 0.0], [1.0, 0.0]])
        keys = keys_2d([[0, 0]], [[0, 0]], [[0, 0], [0, 0]])
        p = tmn_predict(0, 0, keys, ReviewSets([[0]]), ReviewSets([[1]]), S)
        assert p == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-15)
        assert p == pytest.approx(0.880797, abs=1e-6)


def literal_tmn_loss(users, items, labels, P, Q, T, user_sets, item_sets, S, reg):
    """Plain-loop evaluation: softmax attention, weighted word average, sigmoid, cross-entropy."""
    def feature(key, words):
        if not words:
            return [0.0] * len(S[0])
        logits = [sum(key[d] * T[w][d] for d in range(len(key))) for w in words]
        top = max(logits)
        ex = [math.exp(x - top) for x in logits]
        z = sum(ex)
        return [sum(ex[j] / z * S[w][c] for j, w in enumerate(words)) for c in range(len(S[0]))]

    total = 0.0
    for u, i, y in zip(users, items, labels):
        e = feature(P[u], user_sets[u])
        f = feature(Q[i], item_sets[i])
        x = sum(a * b for a, b in zip(e, f))
        p = 1.0 / (1.0 + math.exp(-x))
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    touched_words = {w for u in users for w in user_sets[u]} | {w for i in items for w in item_sets[i]}
    sq = sum(v * v for u in set(users) for v in P[u]) + sum(v * v for i in set(items) for v in Q[i])
    sq += sum(v * v for w in touched_words for v in T[w])
    return total + reg * sq


def small_instance(seed=0, M=8, N=8, H=20, K1=6, K2=4):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(H, K1))
    us = [sorted(rng.choice(H, rng.integers(1, 6), replace=False).tolist()) for _ in range(M)]
    it = [sorted(rng.choice(H, rng.integers(1, 6), replace=False).tolist()) for _ in range(N)]
    keys = MemoryKeys(rng.normal(0, 0.5, (M, K2)), rng.normal(0, 0.5, (N, K2)), rng.normal(0, 0.5, (H, K2)))
    return S, us, it, keys


class TestLoss:
    def test_empty_batch(self):
        S, us, it, keys = small_instance()
        assert tmn_loss([], [], [], keys, ReviewSets(us), ReviewSets(it), S, 0.3) == 0.0

    def test_single_positive_at_half(self):
        S = np.eye(2)
        keys = keys_2d([[0.5, 0.1]], [[0.2, 0.3]], [[1, 1], [2, 0]])
        loss = tmn_loss([0], [0], [1], keys, ReviewSets([[0]]), ReviewSets([[1]]), S, 0.1)
        reg = 0.1 * (0.5**2 + 0.1**2 + 0.2**2 + 0.3**2 + 1 + 1 + 4)
        assert loss == pytest.approx(math.log(2) + reg, abs=1e-12)

    def test_two_pair_transcription(self):
        S, us, it, keys = small_instance(1)
        users, items, labels = [2, 5], [3, 3], [1, 0]
        got = tmn_loss(users, items, labels, keys, ReviewSets(us), ReviewSets(it), S, 0.05)
        ref = literal_tmn_loss(users, items, labels, keys.P.tolist(), keys.Q.tolist(), keys.T.tolist(),
                               us, it, S.tolist(), 0.05)
        assert abs(got - ref) < 1e-10


class TestGradients:
    def test_finite_differences(self):
        S, us, it, keys = small_instance(2)
        rng = np.random.default_rng(5)
        u, i, y = rng.integers(0, 8, 16), rng.integers(0, 8, 16), rng.integers(0, 2, 16)
        ur, ir = ReviewSets(us), ReviewSets(it)
        g = tmn_gradients(u, i, y, keys, ur, ir, S, 0.05)

        def loss(ps):
            return tmn_loss(u, i, y, MemoryKeys(*ps), ur, ir, S, 0.05)

        err = finite_difference_check(loss, [keys.P, keys.Q, keys.T], [g["P"], g["Q"], g["T"]])
        assert err < 1e-4

    def test_untouched_rows_have_zero_gradient(self):
        S, us, it, keys = small_instance(3)
        ur, ir = ReviewSets(us), ReviewSets(it)
        g = tmn_gradients([1], [4], [1], keys, ur, ir, S, 0.2)
        assert not np.any(np.delete(g["P"], 1, axis=0))
        assert not np.any(np.delete(g["Q"], 4, axis=0))
        touched = sorted(set(us[1]) | set(it[4]))
        assert not np.any(np.delete(g["T"], touched, axis=0))

    def test_regulariser_linear_in_lambda(self):
        S, us, it, keys = small_instance(4)
        ur, ir = ReviewSets(us), ReviewSets(it)
        args = ([0, 3], [1, 2], [1, 0], keys, ur, ir, S)
        g0, g1, g2 = (tmn_gradients(*args, lam) for lam in (0.0, 0.1, 0.2))
        for k in ("P", "Q", "T"):
            np.testing.assert_allclose(g2[k] - g0[k], 2 * (g1[k] - g0[k]), atol=1e-12)

    def test_weights_scale_the_data_term(self):
        S, us, it, keys = small_instance(5)
        ur, ir = ReviewSets(us), ReviewSets(it)
        l1, _ = tmn_loss_and_gradients([0], [1], [1], keys, ur, ir, S, 0.0, [1.0])
        l3, _ = tmn_loss_and_gradients([0], [1], [1], keys, ur, ir, S, 0.0, [3.0])
        assert l3 == pytest.approx(3 * l1, rel=1e-12)


def _fit_tmn(bundle, **kw):
    params = dict(n_keys=8, learning_rate=0.05, reg=0.001, max_iter=15, random_state=0)
    params.update(kw)
    return TextMemoryNetwork(**params).fit(
        bundle.matrix("train"), bundle.validation, bundle.interactions.user_words,
        bundle.interactions.item_words, bundle.word_vectors)


class TestTraining:
    def test_planted_topics_beat_popularity(self, small_domains):
        source = small_domains[0]
        tm = _fit_tmn(source)
        pop = ItemPop().fit(source.matrix("train")).evaluate(
            source.validation, exclude=source.train, k_list=(2,)).f1(2)
        assert tm.best_score_ > pop

    def test_seeded_runs_are_bitwise_identical(self, small_domains):
        a = _fit_tmn(small_domains[1], max_iter=4).transform()
        b = _fit_tmn(small_domains[1], max_iter=4).transform()
        assert a.E.tobytes() == b.E.tobytes() and a.F.tobytes() == b.F.tobytes()

    def test_zero_training_pairs(self, small_domains):
        b = small_domains[1]
        empty = b.matrix("train") * 0
        with pytest.raises(ValueError, match="no training pairs"):
            TextMemoryNetwork(max_iter=2).fit(empty, None, b.interactions.user_words,
                                              b.interactions.item_words, b.word_vectors)

    def test_features_frozen_and_cold_entities_zero(self, small_domains):
        b = small_domains[1]
        feats = _fit_tmn(b, max_iter=2).transform()
        assert feats.frozen
        with pytest.raises(ValueError):
            feats.E[0, 0] = 1.0
        empty = [u for u, w in enumerate(b.interactions.user_words) if len(w) == 0]
        assert np.all(feats.E[empty] == 0)

    def test_two_domains_share_semantic_space(self, small_domains):
        source, target, table = small_domains
        fs = _fit_tmn(source, max_iter=2).transform()
        ft = _fit_tmn(target, max_iter=2).transform()
        assert fs.K1 == ft.K1 == table.K1
        np.testing.assert_array_equal(source.word_vectors, target.word_vectors)

    def test_materialize_matches_per_entity(self):
        S, us, it, keys = small_instance(6)
        E, F = materialize(keys, ReviewSets(us), ReviewSets(it), S, chunk=3)
        for u in range(8):
            np.testing.assert_allclose(E[u], textual_feature("user", u, keys, ReviewSets(us), S), atol=1e-14)

    def test_max_iter_honoured(self, small_domains):
        tm = _fit_tmn(small_domains[0], max_iter=3, patience=None)
        assert tm.n_iter_ == 3 and len(tm.history_) == 3


class TestFeatureFiles:
    def test_round_trip_bitwise(self, tmp_path, rng):
        feats = TextualFeatures(rng.normal(size=(5, 3)), rng.normal(size=(4, 3)))
        export_features(feats, tmp_path / "f.bin")
        back = import_features(tmp_path / "f.bin", 5, 4)
        assert back.E.tobytes() == feats.E.tobytes() and back.F.tobytes() == feats.F.tobytes()
        assert back.frozen and not back.E.flags.writeable

    def test_header_records_width(self, tmp_path):
        feats = TextualFeatures(np.zeros((2, 300)), np.zeros((3, 300)))
        export_features(feats, tmp_path / "f.bin")
        raw = (tmp_path / "f.bin").read_bytes()
        assert raw[:8] == b"XDRFEAT1"
        assert np.frombuffer(raw[8:24], "<u8").tolist() == [2, 300]
        assert import_features(tmp_path / "f.bin").K1 == 300

    def test_wrong_user_count(self, tmp_path):
        export_features(TextualFeatures(np.zeros((5, 2)), np.zeros((4, 2))), tmp_path / "f.bin")
        with pytest.raises(ValueError, match="users"):
            import_features(tmp_path / "f.bin", n_users=6)

    def test_not_a_feature_file(self, tmp_path):
        (tmp_path / "f.bin").write_bytes(b"garbage!")
        with pytest.raises(FormatError):
            import_features(tmp_path / "f.bin")
