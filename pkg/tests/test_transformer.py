import numpy as np
import pytest

from dvclab import autodiff as ad
from dvclab.autodiff import Tensor
from dvclab.transformer import (BOS, EOS, PAD, BiModalTransformer,
                                FullyMaskedError, MultiHeadAttention,
                                TransformerConfig, VanillaTransformer,
                                Vocabulary, attention, attention_with_weights,
                                causal_mask, greedy_decode, label_smoothed_kl,
                                positional_encoding, teacher_forced_accuracy,
                                tokenize)
from dvclab.transformer.layers import FeedForward
from gradcheck import check_model_gradients

TINY = TransformerConfig(d_model=8, num_heads=2, num_layers=1, d_ffn=12,
                         dropout_rate=0.0, max_len=16, smoothing=0.1)


class TestPositionalEncoding:
    def test_row_zero_alternates(self):
        pe = positional_encoding(3, 6)
        np.testing.assert_array_equal(pe[0, 0::2], 0.0)
        np.testing.assert_array_equal(pe[0, 1::2], 1.0)

    def test_sin_of_one(self):
        for d_model in (2, 6, 16):
            assert positional_encoding(2, d_model)[1, 0] == pytest.approx(np.sin(1.0))

    def test_bounded(self):
        pe = positional_encoding(50, 10)
        assert (pe >= -1).all() and (pe <= 1).all()

    def test_formula_spot_checks(self):
        pe = positional_encoding(7, 8)
        for pos in (1, 3, 6):
            for i in (0, 1, 2, 3):
                angle = pos / 10000 ** (2 * i / 8)
                assert pe[pos, 2 * i] == pytest.approx(np.sin(angle))
                assert pe[pos, 2 * i + 1] == pytest.approx(np.cos(angle))


class TestAttention:
    def test_single_key_returns_value(self):
        q = np.array([[3.0, -1.0]])
        k = np.array([[0.5, 0.5]])
        v = np.array([[7.0, 8.0, 9.0]])
        out = attention(q, k, v)
        np.testing.assert_allclose(out.data, v)

    def test_zero_query_averages_values(self):
        rng = np.random.default_rng(0)
        k = rng.normal(size=(3, 4))
        v = rng.normal(size=(3, 2))
        out = attention(np.zeros((1, 4)), k, v)
        np.testing.assert_allclose(out.data[0], v.mean(axis=0), atol=1e-12)

    def test_causal_first_position_ignores_future(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(2, 3))
        k = rng.normal(size=(2, 3))
        v1 = rng.normal(size=(2, 3))
        v2 = v1.copy()
        v2[1] += 100.0
        mask = causal_mask(2)
        out1 = attention(q, k, v1, mask=mask)
        out2 = attention(q, k, v2, mask=mask)
        np.testing.assert_allclose(out1.data[0], v1[0], atol=1e-12)
        np.testing.assert_allclose(out1.data[0], out2.data[0], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        _, w = attention_with_weights(rng.normal(size=(4, 5)), rng.normal(size=(6, 5)),
                                      rng.normal(size=(6, 3)))
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)
        mask = np.zeros((4, 6), dtype=bool)
        mask[:, 3:] = True
        _, wm = attention_with_weights(rng.normal(size=(4, 5)), rng.normal(size=(6, 5)),
                                       rng.normal(size=(6, 3)), mask=mask)
        np.testing.assert_allclose(wm.data.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(wm.data[:, 3:], 0.0)

    def test_fully_masked_row_is_error(self):
        mask = np.ones((1, 2), dtype=bool)
        with pytest.raises(FullyMaskedError):
            attention(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((2, 2)), mask=mask)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            attention(np.zeros((1, 3)), np.zeros((2, 4)), np.zeros((2, 4)))
        with pytest.raises(ValueError):
            attention(np.zeros((1, 3)), np.zeros((2, 3)), np.zeros((3, 4)))


class TestMultiHead:
    def test_single_head_identity_reduces_to_attention(self):
        rng = np.random.default_rng(3)
        mha = MultiHeadAttention(4, 1, rng)
        for p in (mha.w_q, mha.w_k, mha.w_v, mha.w_o):
            p.data = np.eye(4)
        q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        np.testing.assert_allclose(mha(q, k, v).data, attention(q, k, v).data, atol=1e-12)

    def test_output_shape(self):
        rng = np.random.default_rng(4)
        mha = MultiHeadAttention(8, 2, rng)
        out = mha(rng.normal(size=(5, 8)), rng.normal(size=(7, 8)), rng.normal(size=(7, 8)))
        assert out.data.shape == (5, 8)

    def test_key_value_permutation_invariance(self):
        rng = np.random.default_rng(5)
        mha = MultiHeadAttention(6, 3, rng)
        q = rng.normal(size=(2, 6))
        k = rng.normal(size=(4, 6))
        v = rng.normal(size=(4, 6))
        perm = rng.permutation(4)
        np.testing.assert_allclose(mha(q, k, v).data, mha(q, k[perm], v[perm]).data,
                                   atol=1e-10)


class TestFeedForward:
    def test_identity_on_nonnegative(self):
        rng = np.random.default_rng(6)
        ffn = FeedForward(3, 3, 3, rng)
        ffn.w1.data = np.eye(3)
        ffn.w2.data = np.eye(3)
        ffn.b1.data[:] = 0
        ffn.b2.data[:] = 0
        u = np.abs(rng.normal(size=(4, 3)))
        np.testing.assert_allclose(ffn(u).data, u)

    def test_negative_inputs_give_bias(self):
        rng = np.random.default_rng(7)
        ffn = FeedForward(2, 2, 2, rng)
        ffn.w1.data = np.eye(2)
        ffn.b1.data[:] = 0
        ffn.w2.data = rng.normal(size=(2, 2))
        u = -np.abs(rng.normal(size=(3, 2))) - 0.1
        np.testing.assert_allclose(ffn(u).data, np.tile(ffn.b2.data, (3, 1)))

    def test_position_wise(self):
        rng = np.random.default_rng(8)
        ffn = FeedForward(4, 6, 4, rng)
        u = rng.normal(size=(5, 4))
        perm = rng.permutation(5)
        np.testing.assert_allclose(ffn(u[perm]).data, ffn(u).data[perm])


class TestVanillaModel:
    def make(self, vocab_size=7, input_dim=3, seed=0):
        return VanillaTransformer(TINY, input_dim, vocab_size, seed=seed)

    def test_encode_shape_and_determinism(self):
        model = self.make().eval()
        rng = np.random.default_rng(9)
        feats = rng.normal(size=(6, 3))
        m1 = model.encode(feats)
        m2 = model.encode(feats)
        assert m1.data.shape == (6, TINY.d_model)
        np.testing.assert_array_equal(m1.data, m2.data)

    def test_different_inputs_differ(self):
        model = self.make().eval()
        rng = np.random.default_rng(10)
        a = model.encode(rng.normal(size=(4, 3)))
        b = model.encode(rng.normal(size=(4, 3)))
        assert not np.allclose(a.data, b.data)

    def test_decoder_causality(self):
        model = self.make().eval()
        rng = np.random.default_rng(11)
        memory = model.encode(rng.normal(size=(5, 3)))
        tokens = np.array([BOS, 4, 5, 6])
        logits = model.decode(tokens, memory).data
        perturbed = tokens.copy()
        perturbed[3] = 3  # change the last token; logits before it must not move
        logits2 = model.decode(perturbed, memory).data
        np.testing.assert_allclose(logits[:3], logits2[:3], atol=1e-9)

    def test_logits_shape_and_softmax(self):
        model = self.make(vocab_size=9).eval()
        memory = model.encode(np.random.default_rng(12).normal(size=(4, 3)))
        logits = model.decode(np.array([BOS]), memory).data
        assert logits.shape == (1, 9)
        probs = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
        assert probs.sum() == pytest.approx(1.0)

    def test_token_range_checked(self):
        model = self.make(vocab_size=5).eval()
        memory = model.encode(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            model.decode(np.array([99]), memory)

    def test_empty_input_rejected(self):
        model = self.make().eval()
        with pytest.raises(ValueError):
            model.encode(np.zeros((0, 3)))

    def test_gradients_match_finite_differences(self):
        cfg = TransformerConfig(d_model=4, num_heads=2, num_layers=1, d_ffn=5,
                                dropout_rate=0.0, max_len=8, smoothing=0.1)
        model = VanillaTransformer(cfg, 2, 6, seed=13)
        model.train()
        rng = np.random.default_rng(14)
        feats = rng.normal(size=(3, 2))
        ins = np.array([BOS, 4, 5])
        outs = np.array([4, 5, EOS])

        def loss_fn():
            return label_smoothed_kl(model.forward(feats, ins), outs, cfg.smoothing)

        worst = check_model_gradients(loss_fn, model.named_parameters())
        assert worst[1] < 1e-4


class TestBiModalModel:
    def make(self, seed=0):
        return BiModalTransformer(TINY, 3, 2, 7, seed=seed)

    def test_encode_shapes(self):
        model = self.make().eval()
        rng = np.random.default_rng(15)
        v, s = model.encode(rng.normal(size=(5, 3)), rng.normal(size=(4, 2)))
        assert v.data.shape == (5, TINY.d_model)
        assert s.data.shape == (4, TINY.d_model)

    def test_tied_weights_symmetric_streams(self):
        model = BiModalTransformer(TINY, 3, 3, 7, seed=16).eval()
        model.proj_sem.load_state_dict(model.proj_vis.state_dict())
        for layer in model.enc_layers:
            layer.self_sem.load_state_dict(layer.self_vis.state_dict())
            layer.cross_sem.load_state_dict(layer.cross_vis.state_dict())
            layer.ffn_sem.load_state_dict(layer.ffn_vis.state_dict())
            for n_s, n_v in zip(layer.norms_sem, layer.norms_vis):
                n_s.load_state_dict(n_v.state_dict())
        stream = np.random.default_rng(17).normal(size=(4, 3))
        v, s = model.encode(stream, stream)
        np.testing.assert_allclose(v.data, s.data, atol=1e-12)

    def test_decoder_causality_and_softmax(self):
        model = self.make().eval()
        rng = np.random.default_rng(18)
        enc = model.encode(rng.normal(size=(4, 3)), rng.normal(size=(4, 2)))
        tokens = np.array([BOS, 4, 5])
        logits = model.decode(tokens, enc).data
        perturbed = tokens.copy()
        perturbed[2] = 6
        logits2 = model.decode(perturbed, enc).data
        np.testing.assert_allclose(logits[:2], logits2[:2], atol=1e-9)
        row = logits[0]
        probs = np.exp(row - row.max()) / np.exp(row - row.max()).sum()
        assert probs.sum() == pytest.approx(1.0)

    def test_bridge_consumes_both_streams(self):
        model = self.make()
        assert model.dec_layers[0].bridge.w1.data.shape[0] == 2 * TINY.d_model

    def test_gradients_match_finite_differences(self):
        cfg = TransformerConfig(d_model=4, num_heads=2, num_layers=1, d_ffn=4,
                                dropout_rate=0.0, max_len=8, smoothing=0.1)
        model = BiModalTransformer(cfg, 2, 2, 6, seed=19)
        model.train()
        rng = np.random.default_rng(20)
        vis = rng.normal(size=(3, 2))
        sem = rng.normal(size=(2, 2))
        ins = np.array([BOS, 4])
        outs = np.array([4, EOS])

        def loss_fn():
            return label_smoothed_kl(model.forward((vis, sem), ins), outs, cfg.smoothing)

        worst = check_model_gradients(loss_fn, model.named_parameters())
        assert worst[1] < 1e-4


class TestLabelSmoothedKL:
    def test_uniform_prediction_gives_log_vocab(self):
        logits = np.zeros((2, 4))
        loss = label_smoothed_kl(Tensor(logits), np.array([1, 3]), gamma=0.0)
        assert float(loss.data) == pytest.approx(np.log(4.0))

    def test_exact_smoothed_match_is_zero(self):
        gamma, vocab = 0.2, 5
        ids = np.array([2, 4])
        target = np.full((2, vocab), gamma / (vocab - 2))
        target[:, PAD] = 0.0
        target[np.arange(2), ids] = 1.0 - gamma
        logits = np.where(target > 0, np.log(np.maximum(target, 1e-300)), -1e3)
        loss = label_smoothed_kl(Tensor(logits), ids, gamma=gamma)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_pad_positions_ignored(self):
        rng = np.random.default_rng(21)
        logits = rng.normal(size=(3, 6))
        ids = np.array([4, 5, 2])
        base = float(label_smoothed_kl(Tensor(logits), ids, gamma=0.1).data)
        padded_logits = np.vstack([logits, rng.normal(size=(2, 6))])
        padded_ids = np.concatenate([ids, [PAD, PAD]])
        padded = float(label_smoothed_kl(Tensor(padded_logits), padded_ids, gamma=0.1).data)
        assert padded == pytest.approx(base, rel=1e-12)

    def test_all_pad_rejected(self):
        with pytest.raises(ValueError):
            label_smoothed_kl(Tensor(np.zeros((2, 4))), np.array([PAD, PAD]), gamma=0.1)

    def test_gamma_zero_equals_cross_entropy(self):
        rng = np.random.default_rng(22)
        logits = rng.normal(size=(5, 8)) * 2
        ids = rng.integers(1, 8, size=5)
        loss = float(label_smoothed_kl(Tensor(logits), ids, gamma=0.0).data)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        ce = -logp[np.arange(5), ids].mean()
        assert loss == pytest.approx(ce, abs=1e-9)


class TestDecodingAndVocab:
    def test_always_end_token_gives_empty_caption(self):
        vocab = Vocabulary(["a", "b"])
        model = VanillaTransformer(TINY, 2, len(vocab), seed=23).eval()
        model.generator.b.data[EOS] = 1e3
        memory = model.encode(np.zeros((2, 2)))
        assert greedy_decode(model, "vanilla", memory, vocab, max_len=10) == []

    def test_never_exceeds_max_len(self):
        vocab = Vocabulary(["a", "b"])
        model = VanillaTransformer(TINY, 2, len(vocab), seed=24).eval()
        model.generator.b.data[EOS] = -1e3  # never stop on its own
        memory = model.encode(np.zeros((2, 2)))
        out = greedy_decode(model, "vanilla", memory, vocab, max_len=5)
        assert len(out) == 5

    def test_tokenize(self):
        assert tokenize("A man, rides; the KAYAK!") == ["a", "man", "rides", "the", "kayak"]

    def test_vocabulary_reserved_and_dense(self):
        v = Vocabulary.from_sentences(["b a", "a c"])
        assert len(v) == 7
        assert v.encode(["a", "zzz"]) == [4, 3]  # most frequent first, unk for OOV
        assert v.decode([0, 1, 2, 3]) == ["<pad>", "<s>", "</s>", "<unk>"]

    def test_teacher_forced_accuracy(self):
        logits = np.array([[0.1, 0.9, 0.0], [0.8, 0.1, 0.0], [0.0, 0.0, 1.0]])
        ids = np.array([1, 0, PAD])
        assert teacher_forced_accuracy(logits, ids) == pytest.approx(1.0)
        assert teacher_forced_accuracy(logits, np.array([1, 1, PAD])) == pytest.approx(0.5)
