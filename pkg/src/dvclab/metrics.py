"""Evaluation metrics: temporal IoU, proposal precision/recall/F1, BLEU.

Proposal scoring matches each proposal greedily in confidence order to the
best-overlapping unmatched ground-truth event; BLEU is the corpus-level
clipped n-gram precision with geometric mean and brevity penalty, no
smoothing.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


@dataclass(frozen=True)
class Segment:
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise ValueError(f"segment start {self.start_s} must precede end {self.end_s}")


def _bounds(seg):
    if isinstance(seg, Segment):
        return seg.start_s, seg.end_s
    if hasattr(seg, "start_s") and hasattr(seg, "end_s"):
        return float(seg.start_s), float(seg.end_s)
    start, end = float(seg[0]), float(seg[1])
    return start, end


def tiou(a, b) -> float:
    """Temporal intersection over union of two segments, in [0, 1]."""
    a0, a1 = _bounds(a)
    b0, b1 = _bounds(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    if union <= 0:
        return 0.0
    return inter / union


@dataclass
class PRFResult:
    precision: float
    recall: float
    f1: float
    per_threshold: dict


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def proposal_prf(proposals_by_video: dict, gt, thresholds=(0.3, 0.5, 0.7, 0.9)) -> PRFResult:
    """Precision/recall/F1 of ranked proposals, averaged over tIoU thresholds.

    ``proposals_by_video`` maps video id to a list of items carrying
    (start_s, end_s, confidence) either as attributes or as the first three
    tuple elements.  At each threshold proposals are matched one-to-one to
    ground-truth events in confidence order.
    """
    thresholds = list(thresholds)
    if not thresholds or any(not 0 < t <= 1 for t in thresholds):
        raise ValueError("thresholds must be a non-empty list within (0, 1]")
    total_gt = sum(len(gt[vid].events) for vid in gt)
    if total_gt == 0:
        raise ValueError("ground-truth set has no events")

    ranked = {}
    total_props = 0
    for vid, props in proposals_by_video.items():
        items = []
        for p in props:
            if hasattr(p, "confidence"):
                items.append((_bounds(p)[0], _bounds(p)[1], float(p.confidence)))
            else:
                items.append((float(p[0]), float(p[1]), float(p[2])))
        items.sort(key=lambda t: (-t[2], t[0], t[1]))
        ranked[vid] = items
        total_props += len(items)

    per_threshold = {}
    for thr in thresholds:
        tp = 0
        for vid, items in ranked.items():
            if vid not in gt:
                continue
            events = list(gt[vid].events)
            taken = [False] * len(events)
            for start, end, _conf in items:
                best, best_iou = -1, 0.0
                for e, ev in enumerate(events):
                    if taken[e]:
                        continue
                    iou = tiou((start, end), ev)
                    if iou > best_iou:
                        best, best_iou = e, iou
                if best >= 0 and best_iou >= thr:
                    taken[best] = True
                    tp += 1
        p = tp / total_props if total_props else 0.0
        r = tp / total_gt
        per_threshold[thr] = (p, r, _f1(p, r))

    precision = sum(v[0] for v in per_threshold.values()) / len(thresholds)
    recall = sum(v[1] for v in per_threshold.values()) / len(thresholds)
    f1 = sum(v[2] for v in per_threshold.values()) / len(thresholds)
    return PRFResult(precision, recall, f1, per_threshold)


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def modified_precision(candidates, references, n: int) -> float:
    """Corpus-level clipped n-gram precision; 0 when no candidate n-grams."""
    clipped = 0
    total = 0
    for cand, ref in zip(candidates, references):
        counts = Counter(_ngrams(cand, n))
        ref_counts = Counter(_ngrams(ref, n))
        total += sum(counts.values())
        clipped += sum(min(c, ref_counts[g]) for g, c in counts.items())
    return clipped / total if total > 0 else 0.0


def bleu(candidates, references, max_n: int = 4) -> list:
    """Corpus BLEU@1..max_n over parallel token-sequence lists.

    BLEU@n multiplies the brevity penalty by the geometric mean of the
    clipped precisions 1..n; a zero precision zeroes the score (no
    smoothing).
    """
    candidates = [list(c) for c in candidates]
    references = [list(r) for r in references]
    if not candidates or len(candidates) != len(references):
        raise ValueError("need equal-length, non-empty candidate and reference lists")
    if max_n < 1:
        raise ValueError("max_n must be >= 1")

    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)

    precisions = [modified_precision(candidates, references, n) for n in range(1, max_n + 1)]
    scores = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if any(p == 0.0 for p in ps):
            scores.append(0.0)
            continue
        log_mean = sum(math.log(p) for p in ps) / n
        scores.append(bp * math.exp(log_mean))
    return scores
