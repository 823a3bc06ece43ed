import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvclab.dataset import AnnotationSet, VideoAnnotation
from dvclab.metrics import (Segment, bleu, modified_precision, proposal_prf,
                            tiou)


def gt_of(events_by_video):
    return AnnotationSet({
        vid: VideoAnnotation(max(e for _, e in events) + 1.0, list(events),
                             ["x"] * len(events))
        for vid, events in events_by_video.items()
    })


class TestTiou:
    def test_identical(self):
        assert tiou((0.0, 5.0), (0.0, 5.0)) == 1.0
        assert tiou(Segment(1.0, 4.0), Segment(1.0, 4.0)) == 1.0

    def test_disjoint(self):
        assert tiou((0.0, 1.0), (2.0, 3.0)) == 0.0

    def test_partial_overlap(self):
        assert tiou((0.0, 2.0), (1.0, 3.0)) == pytest.approx(1.0 / 3.0)

    def test_segment_validation(self):
        with pytest.raises(ValueError):
            Segment(5.0, 5.0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 50), st.floats(0.1, 20), st.floats(0, 50), st.floats(0.1, 20))
    def test_symmetric_and_bounded(self, a0, al, b0, bl):
        a, b = (a0, a0 + al), (b0, b0 + bl)
        assert tiou(a, b) == pytest.approx(tiou(b, a))
        assert 0.0 <= tiou(a, b) <= 1.0


def greedy_oracle(proposals, events, threshold):
    """Slow restatement of the contract: confidence order, one-to-one."""
    order = sorted(proposals, key=lambda p: (-p[2], p[0], p[1]))
    taken = set()
    tp = 0
    for start, end, _conf in order:
        best, best_iou = None, 0.0
        for e, ev in enumerate(events):
            if e in taken:
                continue
            iou = tiou((start, end), ev)
            if iou > best_iou:
                best, best_iou = e, iou
        if best is not None and best_iou >= threshold:
            taken.add(best)
            tp += 1
    return tp


class TestProposalPRF:
    def test_half_precision_full_recall(self):
        gt = gt_of({"v": [(0.0, 10.0)]})
        res = proposal_prf({"v": [(0.0, 10.0, 0.9), (20.0, 30.0, 0.8)]}, gt, [0.5])
        assert res.precision == pytest.approx(0.5)
        assert res.recall == pytest.approx(1.0)
        assert res.f1 == pytest.approx(2.0 / 3.0)

    def test_perfect(self):
        gt = gt_of({"v": [(0.0, 5.0), (6.0, 9.0)]})
        res = proposal_prf({"v": [(0.0, 5.0, 0.7), (6.0, 9.0, 0.6)]}, gt, [0.3, 0.5, 0.9])
        assert res.precision == res.recall == res.f1 == 1.0

    def test_no_overlap(self):
        gt = gt_of({"v": [(0.0, 1.0)]})
        res = proposal_prf({"v": [(5.0, 6.0, 0.9)]}, gt, [0.5])
        assert res.precision == res.recall == res.f1 == 0.0

    def test_empty_gt_rejected(self):
        with pytest.raises(ValueError):
            proposal_prf({"v": []}, AnnotationSet({}), [0.5])

    def test_adding_nonmatching_proposal(self):
        gt = gt_of({"v": [(0.0, 10.0)]})
        base = proposal_prf({"v": [(0.0, 10.0, 0.9)]}, gt, [0.5])
        more = proposal_prf({"v": [(0.0, 10.0, 0.9), (50.0, 60.0, 0.1)]}, gt, [0.5])
        assert more.precision <= base.precision
        assert more.recall == pytest.approx(base.recall)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(1, 5), st.integers(1, 3),
           st.sampled_from([0.3, 0.5, 0.7]))
    def test_matches_greedy_oracle(self, seed, n_props, n_gt, threshold):
        rng = np.random.default_rng(seed)
        events = []
        t = 0.0
        for _ in range(n_gt):
            start = t + rng.uniform(0, 2)
            end = start + rng.uniform(1, 5)
            events.append((start, end))
            t = end
        props = [(s + rng.uniform(-2, 2), None, float(rng.uniform(0.01, 1.0)))
                 for s, _ in events for _ in range(max(1, n_props // n_gt))][:n_props]
        props = [(max(0.0, p[0]), max(0.0, p[0]) + rng.uniform(0.5, 6.0), p[2]) for p in props]
        gt = gt_of({"v": events})
        res = proposal_prf({"v": props}, gt, [threshold])
        tp = greedy_oracle(props, events, threshold)
        assert res.per_threshold[threshold][0] == pytest.approx(tp / len(props))
        assert res.per_threshold[threshold][1] == pytest.approx(tp / len(events))


class TestBleu:
    def test_identity(self):
        cand = [["a", "b", "c", "d", "e"]]
        scores = bleu(cand, [list(cand[0])], max_n=4)
        assert scores == [pytest.approx(1.0)] * 4

    def test_clipping_quarter(self):
        cand = [["the", "the", "the", "the"]]
        ref = [["the", "cat"]]
        assert modified_precision(cand, ref, 1) == pytest.approx(0.25)
        # candidate longer than reference, so no brevity penalty
        assert bleu(cand, ref, max_n=1)[0] == pytest.approx(0.25)

    def test_disjoint_unigrams(self):
        assert bleu([["x", "y"]], [["a", "b"]], max_n=2) == [0.0, 0.0]

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            bleu([], [], max_n=4)

    def test_brevity_penalty(self):
        cand = [["a", "b"]]
        ref = [["a", "b", "c", "d"]]
        scores = bleu(cand, ref, max_n=1)
        assert scores[0] == pytest.approx(np.exp(1 - 4 / 2) * 1.0)

    def test_corpus_permutation_invariance(self):
        cands = [["a", "b"], ["c", "d", "e"], ["f"]]
        refs = [["a", "x"], ["c", "d", "y"], ["f"]]
        fwd = bleu(cands, refs, max_n=2)
        rev = bleu(cands[::-1], refs[::-1], max_n=2)
        assert fwd == pytest.approx(rev)

    def test_monotone_when_candidate_becomes_reference(self):
        cands = [["a", "b", "q"], ["c", "z", "e", "w"]]
        refs = [["a", "b", "c"], ["c", "d", "e", "w"]]
        base = bleu(cands, refs, max_n=2)
        better = bleu([refs[0], cands[1]], refs, max_n=2)
        for lo, hi in zip(base, better):
            assert hi >= lo - 1e-12
