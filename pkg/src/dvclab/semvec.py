"""Dense cluster embeddings from co-occurrence counts.

Trains vectors w, w~ and biases b, b~ so that w_i . w~_j + b_i + b~_j
approximates log Z_ij over nonzero co-occurrence cells, weighted least
squares with the saturating weight (t/t_max)^alpha.  The learned w rows
are the semantic descriptor attached to each clip via its cluster label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codebook import Codebook, assign
from .cooccur import CooccurrenceMatrix
from .dataset import load_feature_matrix, save_feature_matrix


@dataclass
class GloveHyper:
    t_max: float = 100.0
    alpha: float = 0.75
    lr: float = 0.05
    max_iters: int = 1500
    early_stop_patience: int = 100
    d_emb: int = 128
    seed: int = 0

    def __post_init__(self):
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.d_emb < 1 or self.max_iters < 1 or self.early_stop_patience < 1:
            raise ValueError("d_emb, max_iters and early_stop_patience must be >= 1")


@dataclass
class EmbeddingParams:
    """Cluster vectors w, context vectors w_ctx, and both bias sets."""

    w: np.ndarray
    w_ctx: np.ndarray
    b: np.ndarray
    b_ctx: np.ndarray

    def __post_init__(self):
        for name in ("w", "w_ctx", "b", "b_ctx"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
        if self.w.shape != self.w_ctx.shape or self.w.ndim != 2:
            raise ValueError("w and w_ctx must be matrices of identical shape")
        if self.b.shape != (self.k,) or self.b_ctx.shape != (self.k,):
            raise ValueError("biases must be vectors of length k")

    @property
    def k(self) -> int:
        return self.w.shape[0]

    @property
    def d_emb(self) -> int:
        return self.w.shape[1]

    def copy(self) -> "EmbeddingParams":
        return EmbeddingParams(self.w.copy(), self.w_ctx.copy(), self.b.copy(), self.b_ctx.copy())


def weight(t: float, t_max: float = 100.0, alpha: float = 0.75) -> float:
    """Saturating co-occurrence weight: (t/t_max)^alpha below t_max, else 1."""
    if t < 0:
        raise ValueError(f"count must be non-negative, got {t}")
    if t < t_max:
        return (t / t_max) ** alpha
    return 1.0


def _pair_arrays(Z: CooccurrenceMatrix, h: GloveHyper):
    """Nonzero cells as parallel index/weight/log-count arrays, sorted order."""
    triples = [(i, j, c) for i, j, c in Z.nonzero_items() if c > 0]
    if not triples:
        raise ValueError("co-occurrence matrix has no nonzero entries")
    ii = np.array([t[0] for t in triples], dtype=np.int64)
    jj = np.array([t[1] for t in triples], dtype=np.int64)
    cc = np.array([t[2] for t in triples], dtype=np.float64)
    ff = np.where(cc < h.t_max, (cc / h.t_max) ** h.alpha, 1.0)
    return ii, jj, ff, np.log(cc)


def glove_loss(p: EmbeddingParams, Z: CooccurrenceMatrix, h: GloveHyper) -> float:
    """J = sum over nonzero cells of f(Z_ij) (w_i.w~_j + b_i + b~_j - log Z_ij)^2."""
    ii, jj, ff, logz = _pair_arrays(Z, h)
    r = np.einsum("ij,ij->i", p.w[ii], p.w_ctx[jj]) + p.b[ii] + p.b_ctx[jj] - logz
    return float(np.sum(ff * r * r))


def glove_gradients(p: EmbeddingParams, Z: CooccurrenceMatrix, h: GloveHyper):
    """Analytic full-batch gradient of the loss for every parameter block."""
    ii, jj, ff, logz = _pair_arrays(Z, h)
    r = np.einsum("ij,ij->i", p.w[ii], p.w_ctx[jj]) + p.b[ii] + p.b_ctx[jj] - logz
    g = 2.0 * ff * r
    gw = np.zeros_like(p.w)
    gw_ctx = np.zeros_like(p.w_ctx)
    gb = np.zeros_like(p.b)
    gb_ctx = np.zeros_like(p.b_ctx)
    np.add.at(gw, ii, g[:, None] * p.w_ctx[jj])
    np.add.at(gw_ctx, jj, g[:, None] * p.w[ii])
    np.add.at(gb, ii, g)
    np.add.at(gb_ctx, jj, g)
    return gw, gw_ctx, gb, gb_ctx


def init_params(k: int, h: GloveHyper) -> EmbeddingParams:
    """Seeded uniform init in [-0.5/d_emb, 0.5/d_emb] for all blocks."""
    rng = np.random.default_rng(h.seed)
    scale = 0.5 / h.d_emb
    return EmbeddingParams(
        w=rng.uniform(-scale, scale, size=(k, h.d_emb)),
        w_ctx=rng.uniform(-scale, scale, size=(k, h.d_emb)),
        b=rng.uniform(-scale, scale, size=k),
        b_ctx=rng.uniform(-scale, scale, size=k),
    )


def train_embeddings(Z: CooccurrenceMatrix, h: GloveHyper) -> EmbeddingParams:
    """Adagrad training over nonzero cells; returns the best-loss parameters.

    One iteration is a full pass over the nonzero cells in a freshly
    shuffled order, updating each touched row with step lr/sqrt(accum);
    squared-gradient accumulators start at 1 so the first step equals lr.
    Stops at max_iters or after early_stop_patience iterations without
    improvement of the full loss.
    """
    ii, jj, ff, logz = _pair_arrays(Z, h)
    n_pairs = len(ii)
    p = init_params(Z.k, h)
    rng = np.random.default_rng(h.seed + 1)

    acc_w = np.ones_like(p.w)
    acc_wc = np.ones_like(p.w_ctx)
    acc_b = np.ones_like(p.b)
    acc_bc = np.ones_like(p.b_ctx)

    def full_loss():
        r = np.einsum("ij,ij->i", p.w[ii], p.w_ctx[jj]) + p.b[ii] + p.b_ctx[jj] - logz
        return float(np.sum(ff * r * r))

    best_loss = full_loss()
    best = p.copy()
    stale = 0

    for _ in range(h.max_iters):
        order = rng.permutation(n_pairs)
        for idx in order:
            i, j = ii[idx], jj[idx]
            wi, wj = p.w[i], p.w_ctx[j]
            r = wi @ wj + p.b[i] + p.b_ctx[j] - logz[idx]
            g = 2.0 * ff[idx] * r
            gw = g * wj
            gwc = g * wi
            acc_w[i] += gw * gw
            acc_wc[j] += gwc * gwc
            acc_b[i] += g * g
            acc_bc[j] += g * g
            p.w[i] = wi - h.lr * gw / np.sqrt(acc_w[i])
            p.w_ctx[j] = wj - h.lr * gwc / np.sqrt(acc_wc[j])
            p.b[i] -= h.lr * g / np.sqrt(acc_b[i])
            p.b_ctx[j] -= h.lr * g / np.sqrt(acc_bc[j])
        loss = full_loss()
        if loss < best_loss:
            best_loss = loss
            best = p.copy()
            stale = 0
        else:
            stale += 1
            if stale >= h.early_stop_patience:
                break
    return best


def descriptor_for_clip(p: EmbeddingParams, cb: Codebook, x: np.ndarray) -> np.ndarray:
    """Semantic descriptor of one clip: the w row of its assigned cluster."""
    return p.w[assign(cb, x)].copy()


def descriptor_matrix(p: EmbeddingParams, labels: np.ndarray) -> np.ndarray:
    """Rows of w for a whole label sequence, shape (L, d_emb)."""
    labels = np.asarray(labels, dtype=np.int64)
    if (labels < 0).any() or (labels >= p.k).any():
        raise ValueError("label out of range for embedding table")
    return p.w[labels]


def build_clip_features(vis: np.ndarray, sm: np.ndarray) -> np.ndarray:
    """Concatenate visual features with the semantic descriptor: [vis ; sm]."""
    vis = np.asarray(vis, dtype=np.float64)
    sm = np.asarray(sm, dtype=np.float64)
    if vis.ndim != sm.ndim or vis.ndim not in (1, 2):
        raise ValueError("vis and sm must both be vectors or both be matrices")
    if not (np.isfinite(vis).all() and np.isfinite(sm).all()):
        raise ValueError("inputs must be finite")
    return np.concatenate([vis, sm], axis=-1)


def save_embeddings(p: EmbeddingParams, directory, meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_feature_matrix(p.w, directory / "w.dvcf")
    save_feature_matrix(p.w_ctx, directory / "w_ctx.dvcf")
    save_feature_matrix(p.b.reshape(1, -1), directory / "b.dvcf")
    save_feature_matrix(p.b_ctx.reshape(1, -1), directory / "b_ctx.dvcf")
    payload = {"k": p.k, "d_emb": p.d_emb}
    payload.update(meta or {})
    with open(directory / "embedding_meta.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_embeddings(directory) -> EmbeddingParams:
    directory = Path(directory)
    return EmbeddingParams(
        w=load_feature_matrix(directory / "w.dvcf"),
        w_ctx=load_feature_matrix(directory / "w_ctx.dvcf"),
        b=load_feature_matrix(directory / "b.dvcf")[0],
        b_ctx=load_feature_matrix(directory / "b_ctx.dvcf")[0],
    )
