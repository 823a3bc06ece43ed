"""Vanilla and bi-modal transformer encoder-decoders with generator heads.

Both models consume clip-feature sequences (no token inputs on the encoder
side), decode sentences with causal masking, and finish with a linear
generator over the vocabulary.  Every sublayer is wrapped in a residual
connection followed by layer normalization.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Module, Tensor
from .layers import (Embedding, FeedForward, LayerNorm, Linear,
                     MultiHeadAttention, TransformerConfig, causal_mask,
                     positional_encoding)


def _drop(x, rate, rng, training):
    return ad.dropout(x, rate, rng, training and rng is not None)


class EncoderLayer(Module):
    def __init__(self, cfg: TransformerConfig, rng):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.d_model, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.rate = cfg.dropout_rate

    def __call__(self, x, rng, training):
        h = self.norm1(ad.add(x, _drop(self.self_attn(x, x, x), self.rate, rng, training)))
        return self.norm2(ad.add(h, _drop(self.ffn(h), self.rate, rng, training)))


class DecoderLayer(Module):
    def __init__(self, cfg: TransformerConfig, rng):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.d_model, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.norm3 = LayerNorm(cfg.d_model)
        self.rate = cfg.dropout_rate

    def __call__(self, x, memory, mask, rng, training):
        h = self.norm1(ad.add(x, _drop(self.self_attn(x, x, x, mask=mask), self.rate, rng, training)))
        h = self.norm2(ad.add(h, _drop(self.cross_attn(h, memory, memory), self.rate, rng, training)))
        return self.norm3(ad.add(h, _drop(self.ffn(h), self.rate, rng, training)))


class VanillaTransformer(Module):
    """Single-stream encoder over clip features, causal decoder over tokens."""

    def __init__(self, cfg: TransformerConfig, input_dim: int, vocab_size: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.input_dim = input_dim
        self.vocab_size = vocab_size
        self.input_proj = Linear(input_dim, cfg.d_model, rng)
        self.tok_emb = Embedding(vocab_size, cfg.d_model, rng)
        self.enc_layers = [EncoderLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.dec_layers = [DecoderLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.generator = Linear(cfg.d_model, vocab_size, rng)
        self.drop_rng = None  # set by the training loop

    def _embed_inputs(self, features) -> Tensor:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError("clip feature sequence must be a non-empty 2-D matrix")
        if features.shape[1] != self.input_dim:
            raise ValueError(f"feature dim {features.shape[1]} != expected {self.input_dim}")
        x = ad.mul(self.input_proj(Tensor(features)), np.sqrt(self.cfg.d_model))
        return ad.add(x, Tensor(positional_encoding(features.shape[0], self.cfg.d_model)))

    def _embed_tokens(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or len(ids) < 1:
            raise ValueError("token ids must be a non-empty 1-D sequence")
        if len(ids) > self.cfg.max_len:
            raise ValueError(f"target length {len(ids)} exceeds max_len {self.cfg.max_len}")
        if (ids < 0).any() or (ids >= self.vocab_size).any():
            raise ValueError("token id out of range")
        x = ad.mul(self.tok_emb(ids), np.sqrt(self.cfg.d_model))
        return ad.add(x, Tensor(positional_encoding(len(ids), self.cfg.d_model)))

    def encode(self, features) -> Tensor:
        x = _drop(self._embed_inputs(features), self.cfg.dropout_rate, self.drop_rng, self.training)
        for layer in self.enc_layers:
            x = layer(x, self.drop_rng, self.training)
        return x

    def decode(self, token_ids, memory) -> Tensor:
        x = _drop(self._embed_tokens(token_ids), self.cfg.dropout_rate, self.drop_rng, self.training)
        mask = causal_mask(x.shape[0])
        for layer in self.dec_layers:
            x = layer(x, memory, mask, self.drop_rng, self.training)
        return self.generator(x)

    def forward(self, features, token_ids) -> Tensor:
        return self.decode(token_ids, self.encode(features))


class BiModalEncoderLayer(Module):
    """Self-attention per modality, attention across modalities, then FFNs."""

    def __init__(self, cfg: TransformerConfig, rng):
        self.self_vis = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.self_sem = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.cross_vis = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.cross_sem = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.ffn_vis = FeedForward(cfg.d_model, cfg.d_ffn, cfg.d_model, rng)
        self.ffn_sem = FeedForward(cfg.d_model, cfg.d_ffn, cfg.d_model, rng)
        self.norms_vis = [LayerNorm(cfg.d_model) for _ in range(3)]
        self.norms_sem = [LayerNorm(cfg.d_model) for _ in range(3)]
        self.rate = cfg.dropout_rate

    def __call__(self, v, s, rng, training):
        v1 = self.norms_vis[0](ad.add(v, _drop(self.self_vis(v, v, v), self.rate, rng, training)))
        s1 = self.norms_sem[0](ad.add(s, _drop(self.self_sem(s, s, s), self.rate, rng, training)))
        v2 = self.norms_vis[1](ad.add(v1, _drop(self.cross_vis(v1, s1, s1), self.rate, rng, training)))
        s2 = self.norms_sem[1](ad.add(s1, _drop(self.cross_sem(s1, v1, v1), self.rate, rng, training)))
        v3 = self.norms_vis[2](ad.add(v2, _drop(self.ffn_vis(v2), self.rate, rng, training)))
        s3 = self.norms_sem[2](ad.add(s2, _drop(self.ffn_sem(s2), self.rate, rng, training)))
        return v3, s3


class BiModalDecoderLayer(Module):
    """Masked self-attention, two cross-attentions, bridge FFN, output FFN."""

    def __init__(self, cfg: TransformerConfig, rng):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.cross_sem = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.cross_vis = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.bridge = FeedForward(2 * cfg.d_model, cfg.d_ffn, cfg.d_model, rng)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.d_model, rng)
        self.norms = [LayerNorm(cfg.d_model) for _ in range(5)]
        self.rate = cfg.dropout_rate

    def __call__(self, x, vis_mem, sem_mem, mask, rng, training):
        s = self.norms[0](ad.add(x, _drop(self.self_attn(x, x, x, mask=mask), self.rate, rng, training)))
        a_sem = self.norms[1](ad.add(s, _drop(self.cross_sem(s, sem_mem, sem_mem), self.rate, rng, training)))
        a_vis = self.norms[2](ad.add(s, _drop(self.cross_vis(s, vis_mem, vis_mem), self.rate, rng, training)))
        fused = self.bridge(ad.concat([a_sem, a_vis], axis=1))
        b = self.norms[3](ad.add(s, _drop(fused, self.rate, rng, training)))
        return self.norms[4](ad.add(b, _drop(self.ffn(b), self.rate, rng, training)))


class BiModalTransformer(Module):
    """Two-stream encoder (visual and semantic) with a bridged decoder."""

    def __init__(self, cfg: TransformerConfig, vis_dim: int, sem_dim: int,
                 vocab_size: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vis_dim = vis_dim
        self.sem_dim = sem_dim
        self.vocab_size = vocab_size
        self.proj_vis = Linear(vis_dim, cfg.d_model, rng)
        self.proj_sem = Linear(sem_dim, cfg.d_model, rng)
        self.tok_emb = Embedding(vocab_size, cfg.d_model, rng)
        self.enc_layers = [BiModalEncoderLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.dec_layers = [BiModalDecoderLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.generator = Linear(cfg.d_model, vocab_size, rng)
        self.drop_rng = None

    def _embed_stream(self, seq, proj: Linear, dim: int, name: str) -> Tensor:
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim != 2 or seq.shape[0] < 1:
            raise ValueError(f"{name} stream must be a non-empty 2-D matrix")
        if seq.shape[1] != dim:
            raise ValueError(f"{name} stream dim {seq.shape[1]} != expected {dim}")
        x = ad.mul(proj(Tensor(seq)), np.sqrt(self.cfg.d_model))
        return ad.add(x, Tensor(positional_encoding(seq.shape[0], self.cfg.d_model)))

    def encode(self, vis_seq, sem_seq):
        v = _drop(self._embed_stream(vis_seq, self.proj_vis, self.vis_dim, "visual"),
                  self.cfg.dropout_rate, self.drop_rng, self.training)
        s = _drop(self._embed_stream(sem_seq, self.proj_sem, self.sem_dim, "semantic"),
                  self.cfg.dropout_rate, self.drop_rng, self.training)
        for layer in self.enc_layers:
            v, s = layer(v, s, self.drop_rng, self.training)
        return v, s

    def decode(self, token_ids, encoded) -> Tensor:
        vis_mem, sem_mem = encoded
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or len(ids) < 1:
            raise ValueError("token ids must be a non-empty 1-D sequence")
        if len(ids) > self.cfg.max_len:
            raise ValueError(f"target length {len(ids)} exceeds max_len {self.cfg.max_len}")
        if (ids < 0).any() or (ids >= self.vocab_size).any():
            raise ValueError("token id out of range")
        x = ad.mul(self.tok_emb(ids), np.sqrt(self.cfg.d_model))
        x = ad.add(x, Tensor(positional_encoding(len(ids), self.cfg.d_model)))
        x = _drop(x, self.cfg.dropout_rate, self.drop_rng, self.training)
        mask = causal_mask(len(ids))
        for layer in self.dec_layers:
            x = layer(x, vis_mem, sem_mem, mask, self.drop_rng, self.training)
        return self.generator(x)

    def forward(self, streams, token_ids) -> Tensor:
        vis_seq, sem_seq = streams
        return self.decode(token_ids, self.encode(vis_seq, sem_seq))
