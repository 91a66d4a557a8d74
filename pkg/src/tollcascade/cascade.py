"""Three-stage vehicle -> plate -> character recognition cascade."""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .annotations import VEHICLE_CLASSES, LabelMap
from .detector import Detection, Frame
from .exceptions import ConfigurationError, PipelineError, ValidationError
from .geometry import Box, FrameDims, intersection_area, nms
from .validation import check_box_coords, check_probability

__all__ = [
    "PipelineConfig",
    "PipelineResult",
    "CascadeRecognizer",
    "filter_by_reference",
    "select_primary_vehicle",
    "assemble_plate",
    "compute_toll",
    "run_pipeline",
    "DEFAULT_TARIFF",
]

RECOGNIZED = "recognized"
NO_VEHICLE = "no-vehicle"
NO_PLATE = "no-plate"
NO_CHARACTERS = "no-characters"
STATUSES = (RECOGNIZED, NO_VEHICLE, NO_PLATE, NO_CHARACTERS)

# Placeholder amounts; real deployments supply their own table.
DEFAULT_TARIFF = {
    "bus": 90,
    "car": 30,
    "carry-van": 60,
    "truck-type1": 120,
    "truck-type2": 180,
    "van": 50,
}


@dataclass(frozen=True)
class PipelineConfig:
    conf_thresh: float = 0.5
    nms_thresh: float = 0.3
    ref_box: Box | None = None
    input_size: FrameDims = FrameDims(416, 416)
    tariff: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_TARIFF))

    def __post_init__(self):
        check_probability(self.conf_thresh, "conf_thresh")
        check_probability(self.nms_thresh, "nms_thresh")
        if self.ref_box is not None and not isinstance(self.ref_box, Box):
            object.__setattr__(self, "ref_box", Box(*check_box_coords(self.ref_box, "ref_box")))
        if not isinstance(self.input_size, FrameDims):
            object.__setattr__(self, "input_size", FrameDims(*self.input_size))

    def check_tariff(self, vehicle_classes: Sequence[str] = VEHICLE_CLASSES) -> None:
        missing = [c for c in vehicle_classes if c not in self.tariff]
        if missing:
            raise ConfigurationError(f"tariff table lacks vehicle class(es): {', '.join(missing)}")


@dataclass(frozen=True)
class PipelineResult:
    frame_id: int
    status: str
    vehicle: Detection | None = None
    vehicle_class: str | None = None
    plate: Detection | None = None
    characters: tuple[Detection, ...] = ()
    characters_original: tuple[Detection, ...] = ()
    plate_string: str = ""
    toll: float | None = None
    timings_ms: Mapping[str, float] = field(default_factory=dict)

    @property
    def recognized(self) -> bool:
        return self.status == RECOGNIZED

    def to_dict(self, vehicle_labels: LabelMap | None = None,
                char_labels: LabelMap | None = None, timings: bool = True) -> dict:
        vehicle_labels = vehicle_labels or LabelMap.vehicle()
        char_labels = char_labels or LabelMap.character()
        out = {
            "frame": self.frame_id,
            "status": self.status,
            "vehicle": self.vehicle.to_dict(vehicle_labels) if self.vehicle else None,
            "plate": self.plate.to_dict() if self.plate else None,
            "characters": [d.to_dict(char_labels) for d in self.characters],
            "plate_string": self.plate_string,
            "toll": self.toll,
        }
        if self.plate:
            out["plate"]["class"] = "license-plate"
        if timings:
            out["timings_ms"] = {k: round(v, 3) for k, v in self.timings_ms.items()}
        return out


def filter_by_reference(dets: Sequence[Detection], ref: Box) -> list[Detection]:
    """Keep detections whose overlap with the reference box has positive area."""
    return [d for d in dets if intersection_area(d.box, ref) > 0]


def select_primary_vehicle(dets: Sequence[Detection]) -> Detection | None:
    """Highest confidence wins; ties go to the larger box, then to the smaller corners.

    Returns ``None`` on empty input, which the cascade treats as a skipped frame.
    """
    if not dets:
        return None
    return min(dets, key=lambda d: (-d.confidence, -d.box.area, d.box.as_tuple()))


def _char_key(d: Detection) -> tuple:
    return (d.box.xmin, d.box.ymin, d.box.xmax, d.box.ymax, d.label)


def assemble_plate(chars: Sequence[Detection], labels: LabelMap | None = None) -> str:
    """Letters sorted left to right, followed by digits sorted left to right."""
    labels = labels or LabelMap.character()
    letters, digits = [], []
    for d in chars:
        name = labels[d.label]
        (digits if name.isdigit() else letters).append(d)
    ordered = sorted(letters, key=_char_key) + sorted(digits, key=_char_key)
    return "".join(labels[d.label] for d in ordered)


def compute_toll(vehicle_class: str, config: PipelineConfig):
    try:
        return config.tariff[vehicle_class]
    except KeyError:
        raise ConfigurationError(f"no tariff for vehicle class {vehicle_class!r}") from None


def _threshold_nms(dets: Sequence[Detection], config: PipelineConfig) -> list[Detection]:
    return nms([d for d in dets if d.confidence >= config.conf_thresh], config.nms_thresh)


def _clip_to(box: Box, region: Box) -> Box:
    xmin = min(max(box.xmin, region.xmin), region.xmax)
    ymin = min(max(box.ymin, region.ymin), region.ymax)
    xmax = max(min(box.xmax, region.xmax), xmin)
    ymax = max(min(box.ymax, region.ymax), ymin)
    return Box(xmin, ymin, xmax, ymax)


def _call_stage(stage: str, backend, frame: Frame, labels: LabelMap) -> list[Detection]:
    try:
        return list(backend.detect(frame, labels))
    except Exception as exc:
        raise PipelineError(stage, str(exc)) from exc


def run_pipeline(frame: Frame, backends: Mapping[str, object], config: PipelineConfig,
                 labels: Mapping[str, LabelMap] | None = None) -> PipelineResult:
    """Process one frame through the vehicle, plate and character stages.

    ``backends`` maps ``"vehicle"``, ``"plate"`` and ``"character"`` to
    detectors. The first stage that yields nothing decides the status and no
    later stage is called.
    """
    labels = labels or {s: LabelMap.for_stage(s) for s in ("vehicle", "plate", "character")}
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    vehicles = _threshold_nms(_call_stage("vehicle", backends["vehicle"], frame, labels["vehicle"]), config)
    if config.ref_box is not None:
        vehicles = filter_by_reference(vehicles, config.ref_box)
    vehicle = select_primary_vehicle(vehicles)
    timings["vehicle"] = (time.perf_counter() - t0) * 1e3
    if vehicle is None:
        return PipelineResult(frame.frame_id, NO_VEHICLE, timings_ms=timings)
    vehicle_class = labels["vehicle"][vehicle.label]
    # the vehicle stage runs on the original frame, so its box needs no lifting
    vehicle_orig = Detection(frame.to_original(vehicle.box), vehicle.label, vehicle.confidence)

    t0 = time.perf_counter()
    vehicle_frame = frame.crop(vehicle.box, config.input_size)
    plates = _threshold_nms(_call_stage("plate", backends["plate"], vehicle_frame, labels["plate"]), config)
    plate = select_primary_vehicle(plates)
    timings["plate"] = (time.perf_counter() - t0) * 1e3
    if plate is None:
        return PipelineResult(frame.frame_id, NO_PLATE, vehicle_orig, vehicle_class, timings_ms=timings)
    plate_box = _clip_to(vehicle_frame.to_original(plate.box), vehicle_orig.box)
    plate_orig = Detection(plate_box, plate.label, plate.confidence)

    t0 = time.perf_counter()
    plate_frame = vehicle_frame.crop(plate.box, config.input_size)
    chars = _threshold_nms(
        _call_stage("character", backends["character"], plate_frame, labels["character"]), config
    )
    plate_string = assemble_plate(chars, labels["character"])
    timings["character"] = (time.perf_counter() - t0) * 1e3
    if not plate_string:
        return PipelineResult(frame.frame_id, NO_CHARACTERS, vehicle_orig, vehicle_class,
                              plate_orig, timings_ms=timings)
    chars_orig = tuple(
        Detection(plate_frame.to_original(d.box), d.label, d.confidence) for d in chars
    )
    return PipelineResult(
        frame.frame_id,
        RECOGNIZED,
        vehicle_orig,
        vehicle_class,
        plate_orig,
        tuple(chars),
        chars_orig,
        plate_string,
        compute_toll(vehicle_class, config),
        timings,
    )


class _Serialized:
    """Wraps a backend that has declared it cannot serve concurrent calls."""

    def __init__(self, backend):
        self.backend = backend
        self._lock = threading.Lock()

    def detect(self, frame, labels):
        with self._lock:
            return self.backend.detect(frame, labels)


class CascadeRecognizer(BaseEstimator):
    """Vehicle-type and licence-plate recognizer built from three detectors.

    Parameters
    ----------
    vehicle_detector, plate_detector, character_detector : Detector
        Backends for the vehicle, plate and character stages.
    conf_thresh : float, default=0.5
        Detections below this confidence are discarded at every stage.
    nms_thresh : float, default=0.3
        IoU above which a lower-confidence detection of the same class is suppressed.
    ref_box : tuple of 4 floats, default=None
        Reference region in original-frame pixels. When set, only vehicles
        overlapping it are considered.
    input_size : tuple (width, height), default=(416, 416)
        Size that stage-2 and stage-3 crops are resized to.
    tariff : dict, default=None
        Vehicle class name to toll amount; ``None`` uses :data:`DEFAULT_TARIFF`.
    n_jobs : int, default=1
        Worker threads used by :meth:`predict`.
    """

    def __init__(self, vehicle_detector=None, plate_detector=None, character_detector=None,
                 conf_thresh=0.5, nms_thresh=0.3, ref_box=None, input_size=(416, 416),
                 tariff=None, n_jobs=1):
        self.vehicle_detector = vehicle_detector
        self.plate_detector = plate_detector
        self.character_detector = character_detector
        self.conf_thresh = conf_thresh
        self.nms_thresh = nms_thresh
        self.ref_box = ref_box
        self.input_size = input_size
        self.tariff = tariff
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        """Validate parameters and freeze the configuration. ``X``/``y`` are ignored."""
        for stage, det in (("vehicle", self.vehicle_detector), ("plate", self.plate_detector),
                           ("character", self.character_detector)):
            if det is None or not hasattr(det, "detect"):
                raise ValidationError(f"{stage}_detector must provide detect(frame, labels)")
        self.config_ = PipelineConfig(
            conf_thresh=self.conf_thresh,
            nms_thresh=self.nms_thresh,
            ref_box=self.ref_box,
            input_size=self.input_size,
            tariff=dict(DEFAULT_TARIFF if self.tariff is None else self.tariff),
        )
        self.labels_ = {s: LabelMap.for_stage(s) for s in ("vehicle", "plate", "character")}
        self.config_.check_tariff(self.labels_["vehicle"].names)
        self.backends_ = {
            stage: det if getattr(det, "concurrent", True) else _Serialized(det)
            for stage, det in (("vehicle", self.vehicle_detector), ("plate", self.plate_detector),
                               ("character", self.character_detector))
        }
        if int(self.n_jobs) < 1:
            raise ValidationError(f"n_jobs must be >= 1, got {self.n_jobs}")
        return self

    def predict_one(self, frame: Frame) -> PipelineResult:
        check_is_fitted(self, "config_")
        return run_pipeline(frame, self.backends_, self.config_, self.labels_)

    def predict(self, frames: Sequence[Frame]) -> list[PipelineResult]:
        """Run every frame; results come back in input order."""
        check_is_fitted(self, "config_")
        frames = list(frames)
        if self.n_jobs == 1 or len(frames) < 2:
            return [self.predict_one(f) for f in frames]
        with ThreadPoolExecutor(max_workers=int(self.n_jobs)) as pool:
            return list(pool.map(self.predict_one, frames))

    def score(self, frames: Sequence[Frame], y: Sequence[tuple[str, str]]) -> float:
        """Fraction of frames whose vehicle type and plate string are both correct."""
        from .evaluation import end_to_end_correct

        results = self.predict(frames)
        if len(results) != len(y):
            raise ValidationError("frames and ground truth differ in length")
        if not results:
            return 0.0
        hits = sum(end_to_end_correct(r, cls, text) for r, (cls, text) in zip(results, y))
        return hits / len(results)
