"""Visual vocabulary: mini-batch k-means over pooled clip features.

The codebook quantizes clip feature vectors into k discrete "visual words"
by nearest cluster center under squared Euclidean distance.  Fitting uses
the mini-batch scheme with per-center learning rate 1/(assignment count so
far); with batch_size >= dataset size each epoch collapses to a (damped)
Lloyd step, so inertia is non-increasing across epochs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cooccur import LabelSequence
from .dataset import FeatureSequence, load_feature_matrix, save_feature_matrix

# Cap on the temp (chunk, k, d) distance tensor, in elements.
_CHUNK_ELEMENTS = 2 ** 24


@dataclass
class Codebook:
    """k cluster centers over d_vis-dimensional clip features."""

    centers: np.ndarray

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ValueError("centers must be a non-empty 2-D matrix")
        if not np.isfinite(self.centers).all():
            raise ValueError("centers contain non-finite values")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def d_vis(self) -> int:
        return self.centers.shape[1]


def _check_dim(cb: Codebook, dim: int):
    if dim != cb.d_vis:
        raise ValueError(f"feature dimension {dim} does not match codebook d_vis {cb.d_vis}")


def _nearest(X: np.ndarray, centers: np.ndarray):
    """Labels and squared distances of each row of X to its nearest center.

    Distances are computed as an explicit difference per (point, center)
    pair, chunked over points, so results are bitwise identical to a
    brute-force scan.  Ties resolve to the lowest center index via argmin.
    """
    n, d = X.shape
    k = centers.shape[0]
    chunk = max(1, _CHUNK_ELEMENTS // max(k * d, 1))
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        diff = X[lo:hi, None, :] - centers[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        labels[lo:hi] = np.argmin(d2, axis=1)
        dists[lo:hi] = d2[np.arange(hi - lo), labels[lo:hi]]
    return labels, dists


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding on (a sample of) X."""
    n = X.shape[0]
    sample_size = min(n, max(10 * k, 1000))
    idx = rng.choice(n, size=sample_size, replace=False) if sample_size < n else np.arange(n)
    S = X[idx]
    chosen = [int(rng.integers(len(S)))]
    d2 = np.sum((S - S[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
            nxt = int(rng.choice(len(S), p=probs))
        else:
            # all remaining points coincide with chosen centers
            nxt = int(np.setdiff1d(np.arange(len(S)), chosen)[0])
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((S - S[nxt]) ** 2, axis=1))
    return S[chosen].astype(np.float64).copy()


def kmeanspp_init(features: np.ndarray, k: int, seed: int = 0) -> Codebook:
    """The seeded k-means++ initialization that fitting starts from."""
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < k:
        raise ValueError(f"need a 2-D matrix with at least k={k} rows")
    return Codebook(_kmeanspp(X, k, np.random.default_rng(seed)))


def fit_minibatch_kmeans(features: np.ndarray, k: int, epochs: int = 5,
                         batch_size: int = 1024, seed: int = 0) -> Codebook:
    """Fit k centers to pooled clip features.

    Per batch: assignments are computed against frozen centers, then each
    center moves to the count-weighted mean of everything it has absorbed
    so far (the associative form of the per-sample 1/count update).  A
    center that has never absorbed a point is re-seeded to the batch point
    farthest from its own assigned center.  Deterministic given the seed.
    """
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    n, d = X.shape
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")

    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, k, rng)
    counts = np.zeros(k, dtype=np.int64)

    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            batch = X[order[lo:lo + batch_size]]
            labels, d2 = _nearest(batch, centers)
            sums = np.zeros_like(centers)
            np.add.at(sums, labels, batch)
            batch_counts = np.bincount(labels, minlength=k)
            hit = batch_counts > 0
            counts[hit] += batch_counts[hit]
            centers[hit] += (sums[hit] - batch_counts[hit, None] * centers[hit]) / counts[hit, None]

            dead = np.flatnonzero(counts == 0)
            if dead.size:
                far = np.argsort(-d2, kind="stable")
                for rank, c in enumerate(dead):
                    centers[c] = batch[far[rank % len(batch)]]
                    counts[c] = 1
    return Codebook(centers)


def assign(cb: Codebook, x: np.ndarray) -> int:
    """Nearest-center label of a single feature vector (ties: lowest index)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("x must be a 1-D vector")
    _check_dim(cb, x.shape[0])
    d2 = np.einsum("ij,ij->i", cb.centers - x, cb.centers - x)
    return int(np.argmin(d2))


def assign_batch(cb: Codebook, X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D matrix")
    _check_dim(cb, X.shape[1])
    labels, _ = _nearest(X, cb.centers)
    return labels


def encode_sequence(cb: Codebook, fs: FeatureSequence) -> LabelSequence:
    """Element-wise nearest-center labels for a whole video."""
    return LabelSequence(fs.video_id, assign_batch(cb, fs.features))


def inertia(cb: Codebook, features: np.ndarray) -> float:
    """Sum of squared distances to nearest centers (the clustering objective)."""
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    _check_dim(cb, X.shape[1])
    _, d2 = _nearest(X, cb.centers)
    return float(d2.sum())


def save_codebook(cb: Codebook, directory, meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_feature_matrix(cb.centers, directory / "centers.dvcf")
    payload = {"k": cb.k, "d_vis": cb.d_vis}
    payload.update(meta or {})
    with open(directory / "codebook_meta.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_codebook(directory) -> Codebook:
    directory = Path(directory)
    return Codebook(load_feature_matrix(directory / "centers.dvcf"))
