import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tollcascade.annotations import CHARACTER_CLASSES, LabelMap
from tollcascade.cascade import (
    DEFAULT_TARIFF,
    NO_CHARACTERS,
    NO_PLATE,
    NO_VEHICLE,
    RECOGNIZED,
    CascadeRecognizer,
    PipelineConfig,
    assemble_plate,
    compute_toll,
    filter_by_reference,
    run_pipeline,
    select_primary_vehicle,
)
from tollcascade.detector import Detection, Frame, NoiseProfile
from tollcascade.exceptions import ConfigurationError, PipelineError, ValidationError
from tollcascade.geometry import Box, FrameDims
from tollcascade.simulation import build_recognizer, oracle_backends
from tollcascade.synthetic import load_bundled_fixture, make_cascade_fixture

from oracles import pixel_intersection, plate_oracle

CHARS = LabelMap.character()


def D(x0, y0, x1, y1, label=0, conf=0.9):
    return Detection(Box(x0, y0, x1, y1), label, conf)


class Stub:
    """Returns the same detections on every call and counts calls."""

    def __init__(self, dets=(), exc=None):
        self.dets = list(dets)
        self.exc = exc
        self.calls = 0

    def detect(self, frame, labels):
        self.calls += 1
        if self.exc:
            raise self.exc
        return self.dets


def stubs(vehicle=(), plate=(), chars=()):
    return {"vehicle": Stub(vehicle), "plate": Stub(plate), "character": Stub(chars)}


FRAME = Frame(0, FrameDims(640, 480))
CFG = PipelineConfig()


class TestReferenceFilter:
    ref = Box(100, 100, 300, 300)

    def test_overlap_kept_disjoint_dropped(self):
        a, b = D(250, 250, 400, 400), D(500, 500, 600, 600)
        assert filter_by_reference([a, b], self.ref) == [a]

    def test_identical_box_kept(self):
        a = D(100, 100, 300, 300)
        assert filter_by_reference([a], self.ref) == [a]

    def test_edge_contact_dropped(self):
        assert filter_by_reference([D(300, 100, 400, 300)], self.ref) == []

    @given(st.tuples(*[st.integers(0, 64)] * 4), st.tuples(*[st.integers(0, 64)] * 4))
    def test_agrees_with_pixel_overlap(self, a, r):
        box = Box(min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]), max(a[1], a[3]))
        ref = Box(min(r[0], r[2]), min(r[1], r[3]), max(r[0], r[2]), max(r[1], r[3]))
        kept = bool(filter_by_reference([Detection(box, 0, 1.0)], ref))
        assert kept == (pixel_intersection(box.as_tuple(), ref.as_tuple()) > 0)


class TestPrimaryVehicle:
    def test_highest_confidence(self):
        a, b = D(0, 0, 10, 10, conf=0.6), D(0, 0, 100, 100, conf=0.9)
        assert select_primary_vehicle([a, b]) is b

    def test_tie_prefers_larger_area(self):
        small, big = D(0, 0, 80, 50, conf=0.9), D(0, 0, 100, 50, conf=0.9)
        assert big.box.area == 5000 and small.box.area == 4000
        assert select_primary_vehicle([small, big]) is big
        assert select_primary_vehicle([big, small]) is big

    def test_empty(self):
        assert select_primary_vehicle([]) is None


class TestAssemblePlate:
    def test_letters_then_digits(self):
        names = {"B": 11, "A": 10, "1": 1, "2": 2}
        chars = [
            Detection(Box(130, 0, 150, 20), names["2"]),
            Detection(Box(10, 0, 30, 20), names["B"]),
            Detection(Box(95, 0, 115, 20), names["1"]),
            Detection(Box(40, 0, 60, 20), names["A"]),
        ]
        assert CHARS[11] == "B"
        assert assemble_plate(chars, CHARS) == "BA12"

    def test_two_row_layout(self):
        # letters on the top row, digits underneath starting further left
        chars = [
            Detection(Box(60, 0, 80, 20), CHARS.index("K")),
            Detection(Box(90, 0, 110, 20), CHARS.index("T")),
            Detection(Box(20, 30, 40, 50), CHARS.index("7")),
            Detection(Box(50, 30, 70, 50), CHARS.index("3")),
        ]
        assert assemble_plate(chars, CHARS) == "KT73"

    def test_empty(self):
        assert assemble_plate([], CHARS) == ""

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.integers(0, 35), st.integers(0, 400)), max_size=10),
           st.randoms(use_true_random=False))
    def test_matches_oracle_and_permutation_invariant(self, items, rnd):
        # distinct xmin so the oracle ordering is unambiguous
        seen, uniq = set(), []
        for label, x in items:
            if x not in seen:
                seen.add(x)
                uniq.append((label, x))
        dets = [Detection(Box(x, 5, x + 12, 25), label) for label, x in uniq]
        want = plate_oracle([(CHARACTER_CLASSES[label], x) for label, x in uniq])
        assert assemble_plate(dets, CHARS) == want
        rnd.shuffle(dets)
        assert assemble_plate(dets, CHARS) == want

    def test_permutation_invariant_with_ties(self):
        dets = [Detection(Box(10, y, 20, y + 10), lab) for y, lab in [(0, 10), (15, 11), (0, 12), (15, 3)]]
        ref = assemble_plate(dets, CHARS)
        rnd = random.Random(0)
        for _ in range(20):
            rnd.shuffle(dets)
            assert assemble_plate(dets, CHARS) == ref


class TestToll:
    def test_lookup(self):
        assert compute_toll("car", CFG) == DEFAULT_TARIFF["car"]

    def test_missing_class(self):
        cfg = PipelineConfig(tariff={"car": 5})
        with pytest.raises(ConfigurationError, match="bus"):
            compute_toll("bus", cfg)

    def test_missing_class_rejected_at_fit(self):
        backends = stubs()
        model = CascadeRecognizer(backends["vehicle"], backends["plate"], backends["character"],
                                  tariff={"car": 5})
        with pytest.raises(ConfigurationError):
            model.fit()

    def test_pure(self):
        assert [compute_toll("van", CFG) for _ in range(3)] == [DEFAULT_TARIFF["van"]] * 3


class TestRunPipeline:
    def test_full_recognition(self):
        b = stubs(
            vehicle=[D(100, 100, 300, 300, label=1)],
            plate=[D(100, 300, 300, 380, label=0)],
            chars=[D(10, 100, 60, 300, CHARS.index("A")), D(100, 100, 150, 300, CHARS.index("5"))],
        )
        r = run_pipeline(FRAME, b, CFG)
        assert r.status == RECOGNIZED
        assert r.vehicle_class == "car"
        assert r.plate_string == "A5"
        assert r.toll == DEFAULT_TARIFF["car"]
        # plate lifted from the 416 crop back into the 640x480 frame
        assert r.plate.box.as_tuple() == pytest.approx((148.07692, 244.23077, 244.23077, 282.69231), abs=1e-4)
        for c in r.characters_original:
            assert r.plate.box.contains(c.box, tol=1e-6)

    def test_no_vehicle_short_circuits(self):
        b = stubs(plate=[D(0, 0, 10, 10)], chars=[D(0, 0, 10, 10)])
        r = run_pipeline(FRAME, b, CFG)
        assert r.status == NO_VEHICLE
        assert r.plate is None and r.plate_string == "" and r.toll is None
        assert b["plate"].calls == 0 and b["character"].calls == 0

    def test_no_plate(self):
        b = stubs(vehicle=[D(0, 0, 100, 100)], chars=[D(0, 0, 10, 10)])
        r = run_pipeline(FRAME, b, CFG)
        assert r.status == NO_PLATE and r.vehicle is not None
        assert b["character"].calls == 0

    def test_no_characters(self):
        b = stubs(vehicle=[D(0, 0, 100, 100)], plate=[D(0, 0, 100, 50)])
        r = run_pipeline(FRAME, b, CFG)
        assert r.status == NO_CHARACTERS and r.plate is not None and r.toll is None

    def test_confidence_threshold_is_inclusive(self):
        b = stubs(vehicle=[D(0, 0, 100, 100, conf=0.49)])
        assert run_pipeline(FRAME, b, CFG).status == NO_VEHICLE
        b = stubs(vehicle=[D(0, 0, 100, 100, conf=0.5)])
        assert run_pipeline(FRAME, b, CFG).status == NO_PLATE

    def test_reference_box_picks_lane_vehicle(self):
        near = D(50, 50, 200, 200, label=0, conf=0.95)
        lane = D(300, 200, 500, 400, label=3, conf=0.7)
        b = stubs(vehicle=[near, lane], plate=[D(0, 0, 100, 50)], chars=[D(0, 0, 10, 10, 1)])
        assert run_pipeline(FRAME, b, CFG).vehicle_class == "bus"
        cfg = PipelineConfig(ref_box=Box(350, 250, 450, 350))
        assert run_pipeline(FRAME, b, cfg).vehicle_class == "truck-type1"

    def test_backend_failure_names_stage(self):
        b = stubs(vehicle=[D(0, 0, 100, 100)])
        b["plate"] = Stub(exc=RuntimeError("boom"))
        with pytest.raises(PipelineError) as info:
            run_pipeline(FRAME, b, CFG)
        assert info.value.stage == "plate"

    def test_serialization_keys(self):
        b = stubs(vehicle=[D(0, 0, 100, 100)], plate=[D(0, 0, 100, 50)], chars=[D(0, 0, 10, 10, 12)])
        d = run_pipeline(FRAME, b, CFG).to_dict()
        assert list(d) == ["frame", "status", "vehicle", "plate", "characters", "plate_string", "toll",
                           "timings_ms"]
        assert "timings_ms" not in run_pipeline(FRAME, b, CFG).to_dict(timings=False)


@pytest.fixture(scope="module")
def fixture60():
    return load_bundled_fixture()


class TestRecognizer:
    def test_noiseless_oracles_are_perfect(self, fixture60):
        model = build_recognizer(oracle_backends(fixture60))
        assert model.score(fixture60.frames(), fixture60.truth()) == 1.0

    def test_stage_one_drop_skips_later_stages(self, fixture60):
        backends = oracle_backends(fixture60, {"vehicle": NoiseProfile(drop_prob=1.0)})
        results = build_recognizer(backends).predict(fixture60.frames())
        assert {r.status for r in results} == {NO_VEHICLE}
        assert backends["plate"].calls_ == 0 and backends["character"].calls_ == 0

    def test_nesting_invariant(self):
        fx = make_cascade_fixture(40, seed=3)
        noise = {s: NoiseProfile(drop_prob=0.3, jitter_px=1.0) for s in ("vehicle", "plate", "character")}
        backends = oracle_backends(fx, noise, seed=5)
        results = build_recognizer(backends).predict(fx.frames())
        counts = {s: sum(r.status == s for r in results) for s in (NO_VEHICLE, NO_PLATE, NO_CHARACTERS)}
        assert backends["vehicle"].calls_ == len(results)
        assert backends["plate"].calls_ == len(results) - counts[NO_VEHICLE]
        assert backends["character"].calls_ == backends["plate"].calls_ - counts[NO_PLATE]

    def test_monotone_in_drop_probability(self):
        fx = make_cascade_fixture(80, seed=1)
        accs = []
        for p in (0.0, 0.1, 0.3, 0.6):
            noise = {s: NoiseProfile(drop_prob=p) for s in ("vehicle", "plate", "character")}
            accs.append(build_recognizer(oracle_backends(fx, noise, seed=2)).score(fx.frames(), fx.truth()))
        assert accs == sorted(accs, reverse=True)
        assert accs[0] == 1.0

    def test_frame_independence(self, fixture60):
        noise = {"character": NoiseProfile(drop_prob=0.1, jitter_px=2.0)}
        frames = fixture60.frames()
        serial = build_recognizer(oracle_backends(fixture60, noise, seed=4)).predict(frames)
        threaded = build_recognizer(oracle_backends(fixture60, noise, seed=4), n_jobs=4).predict(frames)
        reversed_ = build_recognizer(oracle_backends(fixture60, noise, seed=4)).predict(frames[::-1])[::-1]
        key = [r.to_dict(timings=False) for r in serial]
        assert [r.to_dict(timings=False) for r in threaded] == key
        assert [r.to_dict(timings=False) for r in reversed_] == key

    def test_estimator_api(self):
        b = stubs()
        model = CascadeRecognizer(b["vehicle"], b["plate"], b["character"], conf_thresh=0.6)
        assert model.get_params()["conf_thresh"] == 0.6
        with pytest.raises(NotFittedError):
            model.predict([FRAME])
        twin = clone(model)
        assert twin.get_params()["nms_thresh"] == 0.3

    def test_invalid_params(self):
        b = stubs()
        with pytest.raises(ValidationError):
            CascadeRecognizer(b["vehicle"], b["plate"], b["character"], conf_thresh=2).fit()
        with pytest.raises(ValidationError):
            CascadeRecognizer(b["vehicle"], None, b["character"]).fit()
        with pytest.raises(ValidationError):
            CascadeRecognizer(b["vehicle"], b["plate"], b["character"], n_jobs=0).fit()
