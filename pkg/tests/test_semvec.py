import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvclab.codebook import Codebook
from dvclab.cooccur import CooccurrenceMatrix
from dvclab.semvec import (EmbeddingParams, GloveHyper, build_clip_features,
                           descriptor_for_clip, glove_gradients, glove_loss,
                           init_params, load_embeddings, save_embeddings,
                           train_embeddings, weight)


def matrix(k, counts, window=1):
    return CooccurrenceMatrix(k=k, window=window, counts=counts)


class TestWeight:
    def test_spot_values(self):
        assert weight(0.0) == 0.0
        assert weight(100.0, t_max=100.0) == 1.0
        assert weight(1.0, 100.0, 0.75) == pytest.approx(10 ** -1.5, abs=1e-9)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            weight(-0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 500), st.floats(0, 500))
    def test_monotone_and_bounded(self, a, b):
        lo, hi = sorted((a, b))
        assert weight(lo) <= weight(hi) + 1e-12
        assert 0.0 <= weight(hi) <= 1.0


class TestLoss:
    def test_exact_fit_is_zero(self):
        c = 7.0
        p = EmbeddingParams(w=np.array([[1.0], [0.0]]), w_ctx=np.array([[0.0], [np.log(c)]]),
                            b=np.zeros(2), b_ctx=np.zeros(2))
        Z = matrix(2, {(0, 1): c})
        # w_0 . w~_1 + b_0 + b~_1 = log c exactly
        assert glove_loss(p, Z, GloveHyper(d_emb=1)) == pytest.approx(0.0, abs=1e-15)

    def test_saturated_weight_gives_plain_square(self):
        h = GloveHyper(d_emb=1)
        Z = matrix(2, {(0, 1): h.t_max})
        p = EmbeddingParams(w=np.array([[2.0], [0.0]]), w_ctx=np.array([[0.0], [1.5]]),
                            b=np.array([0.25, 0.0]), b_ctx=np.array([0.0, -0.5]))
        r = 2.0 * 1.5 + 0.25 - 0.5 - np.log(h.t_max)
        assert glove_loss(p, Z, h) == pytest.approx(r ** 2)

    def test_two_pairs_hand_sum(self):
        h = GloveHyper(d_emb=1, t_max=100.0, alpha=0.75)
        Z = matrix(2, {(0, 1): 4.0, (1, 0): 9.0})
        p = EmbeddingParams(w=np.array([[0.5], [-1.0]]), w_ctx=np.array([[2.0], [0.3]]),
                            b=np.array([0.1, 0.2]), b_ctx=np.array([-0.3, 0.4]))
        # hand evaluation, pair by pair
        r01 = 0.5 * 0.3 + 0.1 + 0.4 - np.log(4.0)
        r10 = -1.0 * 2.0 + 0.2 - 0.3 - np.log(9.0)
        want = (4.0 / 100.0) ** 0.75 * r01 ** 2 + (9.0 / 100.0) ** 0.75 * r10 ** 2
        assert glove_loss(p, Z, h) == pytest.approx(want, rel=1e-12)

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            glove_loss(init_params(2, GloveHyper(d_emb=2)), matrix(2, {}), GloveHyper(d_emb=2))

    def test_swap_symmetry(self):
        rng = np.random.default_rng(0)
        h = GloveHyper(d_emb=3)
        counts = {(0, 1): 3.0, (1, 0): 5.0, (2, 2): 2.0, (0, 2): 1.0}
        Z = matrix(3, counts)
        Zt = matrix(3, {(j, i): c for (i, j), c in counts.items()})
        p = EmbeddingParams(w=rng.normal(size=(3, 3)), w_ctx=rng.normal(size=(3, 3)),
                            b=rng.normal(size=3), b_ctx=rng.normal(size=3))
        swapped = EmbeddingParams(w=p.w_ctx, w_ctx=p.w, b=p.b_ctx, b_ctx=p.b)
        assert glove_loss(p, Z, h) == pytest.approx(glove_loss(swapped, Zt, h), rel=1e-12)


def finite_difference(f, arr, eps=1e-6):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        hi = f()
        arr[idx] = orig - eps
        lo = f()
        arr[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


def block_rel_error(analytic, numeric):
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / denom


class TestGradients:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        h = GloveHyper(d_emb=4)
        counts = {}
        for i in range(5):
            for j in range(5):
                if i != j and rng.random() < 0.6:
                    counts[(i, j)] = float(rng.integers(1, 120))
        Z = matrix(5, counts)
        p = EmbeddingParams(w=rng.normal(size=(5, 4)), w_ctx=rng.normal(size=(5, 4)),
                            b=rng.normal(size=5), b_ctx=rng.normal(size=5))
        grads = glove_gradients(p, Z, h)
        f = lambda: glove_loss(p, Z, h)
        for analytic, arr in zip(grads, (p.w, p.w_ctx, p.b, p.b_ctx)):
            numeric = finite_difference(f, arr)
            assert block_rel_error(analytic, numeric) < 1e-4


class TestTraining:
    def test_single_pair_converges(self):
        Z = matrix(2, {(0, 1): np.e, (1, 0): np.e})
        h = GloveHyper(d_emb=1, max_iters=600, early_stop_patience=600, seed=1)
        p = train_embeddings(Z, h)
        r = p.w[0] @ p.w_ctx[1] + p.b[0] + p.b_ctx[1] - 1.0
        assert abs(r) < 1e-2

    def test_loss_never_worse_than_init(self):
        rng = np.random.default_rng(3)
        counts = {(i, j): float(rng.integers(1, 40))
                  for i in range(4) for j in range(4) if i != j}
        Z = matrix(4, counts)
        h = GloveHyper(d_emb=2, max_iters=30, seed=3)
        final = glove_loss(train_embeddings(Z, h), Z, h)
        initial = glove_loss(init_params(4, h), Z, h)
        assert final <= initial + 1e-12

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            train_embeddings(matrix(3, {}), GloveHyper(d_emb=2))

    def test_deterministic(self):
        counts = {(0, 1): 3.0, (1, 0): 3.0, (1, 2): 8.0, (2, 1): 8.0}
        h = GloveHyper(d_emb=2, max_iters=20, seed=5)
        a = train_embeddings(matrix(3, counts), h)
        b = train_embeddings(matrix(3, counts), h)
        np.testing.assert_array_equal(a.w, b.w)
        np.testing.assert_array_equal(a.b_ctx, b.b_ctx)


class TestDescriptor:
    def test_center_hit_returns_w_row(self):
        rng = np.random.default_rng(7)
        cb = Codebook(rng.normal(size=(4, 3)))
        p = EmbeddingParams(w=rng.normal(size=(4, 5)), w_ctx=rng.normal(size=(4, 5)),
                            b=np.zeros(4), b_ctx=np.zeros(4))
        np.testing.assert_array_equal(descriptor_for_clip(p, cb, cb.centers[2]), p.w[2])

    def test_same_cluster_same_descriptor(self):
        cb = Codebook(np.array([[0.0], [10.0]]))
        p = EmbeddingParams(w=np.array([[1.0, 2.0], [3.0, 4.0]]),
                            w_ctx=np.zeros((2, 2)), b=np.zeros(2), b_ctx=np.zeros(2))
        a = descriptor_for_clip(p, cb, np.array([0.4]))
        b = descriptor_for_clip(p, cb, np.array([-0.6]))
        np.testing.assert_array_equal(a, b)

    def test_default_dimension_is_128(self):
        h = GloveHyper()
        assert h.d_emb == 128
        assert init_params(3, h).d_emb == 128


class TestConcatenation:
    def test_paper_scale_lengths(self):
        v = np.zeros(1024)
        s = np.ones(128)
        out = build_clip_features(v, s)
        assert out.shape == (1152,)

    def test_head_is_visual(self):
        v = np.arange(5.0)
        s = np.array([9.0, 8.0])
        out = build_clip_features(v, s)
        np.testing.assert_array_equal(out[:5], v)
        np.testing.assert_array_equal(out[5:], s)

    def test_zero_head(self):
        s = np.array([1.0, 2.0, 3.0])
        out = build_clip_features(np.zeros(2), s)
        np.testing.assert_array_equal(out[:2], 0.0)
        np.testing.assert_array_equal(out[2:], s)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            build_clip_features(np.array([np.nan]), np.array([1.0]))


def test_embedding_persistence(tmp_path):
    rng = np.random.default_rng(11)
    p = EmbeddingParams(w=rng.normal(size=(3, 4)).astype(np.float32),
                        w_ctx=rng.normal(size=(3, 4)).astype(np.float32),
                        b=rng.normal(size=3).astype(np.float32),
                        b_ctx=rng.normal(size=3).astype(np.float32))
    save_embeddings(p, tmp_path, meta={"final_loss": 1.5})
    back = load_embeddings(tmp_path)
    np.testing.assert_array_equal(back.w, p.w)
    np.testing.assert_array_equal(back.b_ctx, p.b_ctx)
