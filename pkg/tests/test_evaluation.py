from fractions import Fraction

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from tollcascade.annotations import GroundTruthBox, LabelMap
from tollcascade.cascade import PipelineResult
from tollcascade.detector import Detection
from tollcascade.evaluation import (
    aggregate_reports,
    average_precision,
    end_to_end_accuracy,
    end_to_end_correct,
    evaluate_detections,
    map50,
    match_detections,
    prf_at_threshold,
    prf_over_frames,
)
from tollcascade.exceptions import EvaluationError
from tollcascade.geometry import Box

from oracles import best_assignment_tp, greedy_match, prefix_enumeration_ap


def D(box, conf=0.9, label=0):
    return Detection(Box(*box), label, conf)


def G(box, label=0):
    return GroundTruthBox(Box(*box), label)


# three plates; ranked hits go TP, FP, TP, TP
HAND_GT = [[G((10, 10, 110, 50)), G((200, 100, 300, 140))], [G((50, 300, 150, 340))]]
HAND_DETS = [
    [D((10, 10, 110, 50), 0.9), D((200, 100, 300, 140), 0.6)],
    [D((300, 300, 400, 340), 0.8), D((50, 300, 150, 340), 0.7)],
]
HAND = list(zip(HAND_DETS, HAND_GT))


class TestMatching:
    def test_single_true_positive(self):
        m = match_detections([D((0, 0, 10, 10))], [G((0, 0, 10, 10))])
        assert (m.tp, m.fp, m.fn) == (1, 0, 0)

    def test_duplicate_is_false_positive(self):
        m = match_detections([D((0, 0, 10, 10), 0.9), D((0, 0, 10, 10), 0.8)], [G((0, 0, 10, 10))])
        assert (m.tp, m.fp, m.fn) == (1, 1, 0)
        assert m.verdicts == (True, False)

    def test_iou_exactly_half_is_miss(self):
        # 10x10 vs 10x20 sharing the top half: IoU = 100/200
        m = match_detections([D((0, 0, 10, 10))], [G((0, 0, 10, 20))])
        assert (m.tp, m.fp, m.fn) == (0, 1, 1)

    def test_class_must_agree(self):
        m = match_detections([D((0, 0, 10, 10), label=1)], [G((0, 0, 10, 10), label=0)])
        assert m.tp == 0

    def test_greedy_claims_highest_iou(self):
        gts = [G((0, 0, 10, 10)), G((1, 0, 11, 10))]
        m = match_detections([D((1, 0, 11, 10))], gts)
        assert m.matched_gt == (1,)

    @settings(max_examples=80)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(3, 6)), max_size=4),
           st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(3, 6)), max_size=3))
    def test_conservation_and_optimality_bound(self, det_spec, gt_spec):
        dets = [D((x, y, x + s, y + s), conf=1 - i / 10) for i, (x, y, s) in enumerate(det_spec)]
        gts = [G((x, y, x + s, y + s)) for x, y, s in gt_spec]
        m = match_detections(dets, gts)
        assert m.tp + m.fp == len(dets)
        assert m.tp + m.fn == len(gts)
        oracle = best_assignment_tp(
            [(d.confidence, 0, d.box.as_tuple()) for d in dets], [(0, g.box.as_tuple()) for g in gts]
        )
        assert m.tp <= oracle


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([([D((0, 0, 10, 10))], [G((0, 0, 10, 10))])], 0) == 1.0

    def test_all_wrong(self):
        assert average_precision([([D((20, 20, 30, 30))], [G((0, 0, 10, 10))])], 0) == 0.0

    def test_no_detections(self):
        assert average_precision([([], [G((0, 0, 10, 10))])], 0) == 0.0

    def test_undefined_without_ground_truth(self):
        assert average_precision([([D((0, 0, 1, 1))], [])], 0) is None

    def test_hand_fixture(self):
        assert average_precision(HAND, 0) == pytest.approx(5 / 6, abs=1e-9)

    def test_eleven_point(self):
        # envelope: 1 up to recall 1/3, 3/4 beyond -> (4 * 1 + 7 * 0.75) / 11
        assert average_precision(HAND, 0, interpolation="11-point") == pytest.approx(9.25 / 11, abs=1e-12)

    def test_unknown_interpolation(self):
        with pytest.raises(ValueError):
            average_precision(HAND, 0, interpolation="spline")

    @settings(max_examples=150)
    @given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(4, 20)), max_size=8),
           st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(4, 20)), min_size=1, max_size=5))
    def test_matches_exact_oracle(self, det_spec, gt_spec):
        dets = [D((x, y, x + s, y + s), conf=1 - i / 16) for i, (x, y, s) in enumerate(det_spec)]
        gts = [G((x, y, x + s, y + s)) for x, y, s in gt_spec]
        flags = greedy_match([(d.confidence, 0, d.box.as_tuple()) for d in dets],
                             [(0, g.box.as_tuple()) for g in gts])
        want = prefix_enumeration_ap([hit for _, hit in flags], len(gts))
        assert average_precision([(dets, gts)], 0) == pytest.approx(float(want), abs=1e-12)

    @settings(max_examples=100)
    @given(st.lists(st.booleans(), min_size=1, max_size=10), st.data())
    def test_demoting_a_hit_never_helps(self, hits, data):
        assume(any(hits))
        n_gt = sum(hits) + data.draw(st.integers(0, 3))
        idx = data.draw(st.sampled_from([i for i, h in enumerate(hits) if h]))
        worse = list(hits)
        worse[idx] = False
        assert prefix_enumeration_ap(worse, n_gt) <= prefix_enumeration_ap(hits, n_gt)
        # the package agrees with the oracle on both rankings
        for flags, want in ((hits, prefix_enumeration_ap(hits, n_gt)), (worse, prefix_enumeration_ap(worse, n_gt))):
            frames = _frames_from_flags(flags, n_gt)
            assert average_precision(frames, 0) == pytest.approx(float(want), abs=1e-12)


def _frames_from_flags(flags, n_gt):
    """One frame per ranked detection, hits on their own GT, misses far away."""
    frames = []
    for i, hit in enumerate(flags):
        box = (0, 0, 10, 10) if hit else (50, 50, 60, 60)
        gts = [G((0, 0, 10, 10))] if hit else []
        frames.append(([D(box, conf=1 - i / 20)], gts))
    spare = n_gt - sum(flags)
    frames.extend(([], [G((0, 0, 10, 10))]) for _ in range(spare))
    return frames


class TestMap:
    def test_examples(self):
        assert map50({"a": 1.0, "b": 1.0}) == 1.0
        assert map50({"a": 1.0, "b": 0.0}) == 0.5
        assert map50({"a": 0.8333, "b": 1.0, "c": 0.5}) == pytest.approx(0.7778, abs=1e-4)

    def test_undefined_classes_excluded(self):
        assert map50({"a": 0.5, "b": None}) == 0.5

    def test_nothing_defined(self):
        with pytest.raises(EvaluationError):
            map50({"a": None})

    @given(st.dictionaries(st.text(min_size=1, max_size=3), st.floats(0, 1), min_size=1, max_size=8),
           st.randoms(use_true_random=False))
    def test_class_order_irrelevant(self, aps, rnd):
        items = list(aps.items())
        rnd.shuffle(items)
        assert map50(dict(items)) == pytest.approx(map50(aps), abs=1e-12)


class TestPRF:
    def test_perfect(self):
        assert prf_at_threshold([D((0, 0, 10, 10))], [G((0, 0, 10, 10))]) == (1.0, 1.0, 1.0)

    def test_no_detections(self):
        gts = [G((i * 20, 0, i * 20 + 10, 10)) for i in range(5)]
        assert prf_at_threshold([], gts) == (1.0, 0.0, 0.0)

    def test_three_one_one(self):
        gts = [G((i * 20, 0, i * 20 + 10, 10)) for i in range(4)]
        dets = [D(g.box.as_tuple()) for g in gts[:3]] + [D((200, 200, 210, 210))]
        p, r, f1 = prf_at_threshold(dets, gts)
        assert (p, r, f1) == pytest.approx((0.75, 0.75, 0.75))

    def test_confidence_cut(self):
        dets = [D((0, 0, 10, 10), 0.4)]
        assert prf_at_threshold(dets, [G((0, 0, 10, 10))], conf_thresh=0.5) == (1.0, 0.0, 0.0)

    def test_pooled_counts(self):
        p, r, f1, counts = prf_over_frames(HAND, conf_thresh=0.5)
        assert counts == {"tp": 3, "fp": 1, "fn": 0}
        assert (p, r) == (0.75, 1.0)

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(3, 12)), max_size=6),
           st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(3, 12)), max_size=6))
    def test_f1_zero_iff_no_true_positive(self, det_spec, gt_spec):
        dets = [D((x, y, x + s, y + s)) for x, y, s in det_spec]
        gts = [G((x, y, x + s, y + s)) for x, y, s in gt_spec]
        _, _, f1, counts = prf_over_frames([(dets, gts)])
        assert (f1 == 0) == (counts["tp"] == 0)
        assert 0.0 <= f1 <= 1.0


def _result(status, cls, plate):
    return PipelineResult(0, status, vehicle_class=cls, plate_string=plate)


class TestEndToEnd:
    def test_conjunction(self):
        ok = _result("recognized", "car", "AB123")
        assert end_to_end_correct(ok, "car", "ab-123")
        assert not end_to_end_correct(ok, "van", "AB123")
        assert not end_to_end_correct(ok, "car", "AB124")
        assert not end_to_end_correct(_result("no-plate", "car", None), "car", "AB123")

    def test_per_type_accuracy(self):
        results = [_result("recognized", "car", "A1"), _result("recognized", "car", "B2"),
                   _result("no-vehicle", None, None)]
        truth = [("car", "A1"), ("car", "XX"), ("bus", "C3")]
        assert end_to_end_accuracy(results, truth) == {"bus": 0.0, "car": 0.5}

    def test_length_mismatch(self):
        with pytest.raises(EvaluationError):
            end_to_end_accuracy([_result("recognized", "car", "A1")], [])


class TestReports:
    def test_evaluate_detections(self):
        report = evaluate_detections(HAND, LabelMap.plate())
        d = report.to_dict()
        assert list(d) == ["per_class_ap", "map50", "precision", "recall", "f1", "end_to_end", "counts", "seeds"]
        assert d["map50"] == pytest.approx(5 / 6)
        assert d["counts"]["ground_truth"] == 3 and d["counts"]["detections"] == 4

    def test_aggregate(self):
        a = evaluate_detections(HAND, LabelMap.plate(), seeds=[0])
        perfect = [([D(g.box.as_tuple()) for g in gts], gts) for gts in HAND_GT]
        b = evaluate_detections(perfect, LabelMap.plate(), seeds=[1])
        agg = aggregate_reports([a, b])
        assert agg.map50 == pytest.approx((5 / 6 + 1) / 2)
        assert agg.spread["map50"] == pytest.approx((1 - 5 / 6) / 2)
        assert agg.seeds == [0, 1]
        assert "std" in agg.to_dict()

    def test_aggregate_empty(self):
        with pytest.raises(EvaluationError):
            aggregate_reports([])


def test_hand_fixture_oracle_value():
    flags = greedy_match(
        [(d.confidence, 0, d.box.as_tuple()) for dets in HAND_DETS for d in dets],
        [(0, g.box.as_tuple()) for gts in HAND_GT for g in gts],
        size=416,
    )
    assert prefix_enumeration_ap([h for _, h in flags], 3) == Fraction(5, 6)
