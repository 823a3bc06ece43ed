"""Sparse co-occurrence counts over cluster-label sequences.

A labeled video is a "storytelling" of cluster ids; two labels co-occur
when their positions lie within a symmetric context window of each other
inside the same video.  Counts are unweighted integers and never span
video boundaries.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np


@dataclass
class LabelSequence:
    """Ordered cluster labels for one video."""

    video_id: str
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.labels) < 1:
            raise ValueError("labels must be a non-empty 1-D integer sequence")
        if (self.labels < 0).any():
            raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)


class CooccurrenceMatrix:
    """Symmetric sparse counts Z over a vocabulary of k labels."""

    def __init__(self, k: int, window: int, counts: dict | None = None):
        if k < 1:
            raise ValueError("k must be >= 1")
        if window < 1:
            raise ValueError("window must be >= 1")
        self.k = k
        self.window = window
        self.counts = dict(counts or {})
        self._row_sums = None

    def get(self, i: int, j: int) -> int:
        self._check_index(i)
        self._check_index(j)
        return self.counts.get((i, j), 0)

    def row_sum(self, i: int) -> int:
        """Z_i: total count of anything appearing in the context of i."""
        self._check_index(i)
        if self._row_sums is None:
            sums = np.zeros(self.k, dtype=np.int64)
            for (a, _), c in self.counts.items():
                sums[a] += c
            self._row_sums = sums
        return int(self._row_sums[i])

    @property
    def nnz(self) -> int:
        return len(self.counts)

    def total(self) -> int:
        return int(sum(self.counts.values()))

    def nonzero_items(self):
        """Deterministically ordered (i, j, count) triples."""
        for (i, j) in sorted(self.counts):
            yield i, j, self.counts[(i, j)]

    def _check_index(self, i):
        if not 0 <= i < self.k:
            raise IndexError(f"label {i} out of range [0, {self.k})")


def count_cooccurrences(corpus, k: int, window: int) -> CooccurrenceMatrix:
    """Tabulate how often label j appears within ``window`` clips of label i.

    Every ordered position pair (p, q) with 1 <= |p - q| <= window inside one
    sequence increments Z[label(p)][label(q)] by one, so the result is
    symmetric and a position never co-occurs with itself.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    counts = Counter()
    for seq in corpus:
        labels = seq.labels
        if (labels >= k).any():
            bad = int(labels[labels >= k][0])
            raise ValueError(f"label {bad} out of range [0, {k}) in video {seq.video_id}")
        n = len(labels)
        for p in range(n):
            a = int(labels[p])
            for q in range(p + 1, min(p + window, n - 1) + 1):
                b = int(labels[q])
                counts[(a, b)] += 1
                counts[(b, a)] += 1
    return CooccurrenceMatrix(k, window, counts)


def cooccurrence_probability(Z: CooccurrenceMatrix, i: int, j: int) -> float:
    """P(j | i) = Z_ij / Z_i, with the empty-context convention P = 0."""
    zi = Z.row_sum(i)
    zij = Z.get(i, j)
    if zi == 0:
        return 0.0
    return zij / zi


def save_cooccurrence(Z: CooccurrenceMatrix, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{Z.k} {Z.window}\n")
        for i, j, c in Z.nonzero_items():
            fh.write(f"{i} {j} {c}\n")


def load_cooccurrence(path) -> CooccurrenceMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: expected header 'k S'")
        k, window = int(header[0]), int(header[1])
        counts = {}
        for line in fh:
            if not line.strip():
                continue
            i, j, c = line.split()
            counts[(int(i), int(j))] = int(c)
    return CooccurrenceMatrix(k, window, counts)
