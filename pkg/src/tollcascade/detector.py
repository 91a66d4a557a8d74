"""Detector backends consumed by the cascade.

Any object with a ``detect(frame, labels)`` method returning :class:`Detection`
instances can drive a stage. Two backends ship here: :class:`OracleDetector`,
a ground-truth-driven mock with a seeded noise model, and
:class:`ExternalProcessDetector`, which talks to a real inference process
over a line protocol.
"""
from __future__ import annotations

import json
import os
import subprocess
import tempfile
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .annotations import GroundTruthBox, LabelMap
from .exceptions import DetectorError, ValidationError
from .geometry import Box, CropRegion, FrameDims, lift_through_chain, project_through_chain
from .validation import check_non_negative, check_probability, check_range

__all__ = [
    "Detection",
    "Frame",
    "NoiseProfile",
    "Detector",
    "OracleDetector",
    "ExternalProcessDetector",
    "oracle_detect",
]


@dataclass(frozen=True)
class Detection:
    box: Box
    label: int
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "confidence", check_probability(self.confidence, "confidence"))
        if int(self.label) != self.label or self.label < 0:
            raise ValidationError(f"class index must be a non-negative integer, got {self.label!r}")
        object.__setattr__(self, "label", int(self.label))

    def to_dict(self, labels: LabelMap | None = None) -> dict:
        return {
            "class": labels[self.label] if labels is not None else self.label,
            "conf": round(self.confidence, 6),
            "box": [round(v, 4) for v in self.box.as_tuple()],
        }


@dataclass(frozen=True)
class Frame:
    """An image handed to a detector, plus how it relates to the original frame.

    ``chain`` holds one ``(CropRegion, child_dims)`` link per crop-and-resize
    applied since the original camera frame; the original frame has an empty
    chain. ``image`` (an ``HxW[xC]`` array) and ``path`` are optional and only
    passed through to backends that need pixels.
    """

    frame_id: int
    dims: FrameDims
    chain: tuple = ()
    image: Any = field(default=None, compare=False, repr=False)
    path: str | None = None

    @property
    def original_dims(self) -> FrameDims:
        return self.chain[0][0].parent if self.chain else self.dims

    def to_original(self, box: Box) -> Box:
        return lift_through_chain(box, self.chain)

    def from_original(self, box: Box) -> Box:
        return project_through_chain(box, self.chain)

    def crop(self, box: Box, resize_to: FrameDims | None = None) -> "Frame":
        region = CropRegion.from_box(box, self.dims)
        dims = resize_to or region.dims
        image = None
        source = self.image
        if source is None and self.path is not None and not self.chain:
            # original frames from disk are decoded only once a crop needs them
            source = _load_pixels(self.path)
        if source is not None:
            image = _crop_pixels(source, region, dims)
        return Frame(self.frame_id, dims, self.chain + ((region, dims),), image=image)


def _load_pixels(path: str):
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise DetectorError("image", f"cannot read {path}: {exc}") from exc


def _crop_pixels(image, region: CropRegion, dims: FrameDims):
    from PIL import Image

    arr = np.asarray(image)
    x0, y0, x1, y1 = (int(v) for v in region.box.as_tuple())
    patch = arr[y0:y1, x0:x1]
    if (patch.shape[1], patch.shape[0]) == (dims.width, dims.height):
        return patch
    return np.asarray(Image.fromarray(patch).resize((dims.width, dims.height), Image.BILINEAR))


@dataclass(frozen=True)
class NoiseProfile:
    drop_prob: float = 0.0
    spurious_rate: float = 0.0
    jitter_px: float = 0.0
    misclass_prob: float = 0.0
    confidence_range: tuple[float, float] = (1.0, 1.0)
    seed: int = 0

    _ALIASES = {
        "drop": "drop_prob",
        "spurious": "spurious_rate",
        "jitter": "jitter_px",
        "misclass": "misclass_prob",
    }

    def __post_init__(self):
        object.__setattr__(self, "drop_prob", check_probability(self.drop_prob, "drop_prob"))
        object.__setattr__(self, "misclass_prob", check_probability(self.misclass_prob, "misclass_prob"))
        object.__setattr__(self, "spurious_rate", check_non_negative(self.spurious_rate, "spurious_rate"))
        object.__setattr__(self, "jitter_px", check_non_negative(self.jitter_px, "jitter_px"))
        object.__setattr__(self, "confidence_range", check_range(self.confidence_range, "confidence_range"))
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValidationError(f"seed must be a non-negative integer, got {self.seed!r}")
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def is_noiseless(self) -> bool:
        return (
            self.drop_prob == 0
            and self.spurious_rate == 0
            and self.jitter_px == 0
            and self.misclass_prob == 0
        )

    def updated(self, **overrides) -> "NoiseProfile":
        """Copy with overrides; accepts the short CLI names (``drop``, ``jitter``...)."""
        clean = {self._ALIASES.get(k, k): v for k, v in overrides.items()}
        known = {f.name for f in fields(self)}
        unknown = set(clean) - known
        if unknown:
            raise ValidationError(f"unknown noise parameter(s): {sorted(unknown)}")
        return replace(self, **clean)

    def to_dict(self) -> dict:
        return {
            "drop_prob": self.drop_prob,
            "spurious_rate": self.spurious_rate,
            "jitter_px": self.jitter_px,
            "misclass_prob": self.misclass_prob,
            "confidence_range": list(self.confidence_range),
            "seed": self.seed,
        }


NOISELESS = NoiseProfile()


def _frame_rng(seed: int, frame_id: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, frame_id, stream]))


def _valid_box(x0, y0, x1, y1, dims: FrameDims) -> Box:
    x0, x1 = (min(max(v, 0.0), dims.width) for v in (x0, x1))
    y0, y1 = (min(max(v, 0.0), dims.height) for v in (y0, y1))
    if x0 > x1:
        x0 = x1 = (x0 + x1) / 2
    if y0 > y1:
        y0 = y1 = (y0 + y1) / 2
    return Box(x0, y0, x1, y1)


def oracle_detect(gt: Sequence[GroundTruthBox], dims: FrameDims, noise: NoiseProfile,
                  frame_id: int, n_classes: int, stream: int = 0) -> list[Detection]:
    """Turn ground truth into detections through a seeded noise model.

    The random stream depends only on ``(noise.seed, frame_id, stream)``, and
    every ground-truth box consumes the same number of draws whether or not it
    is dropped. Consequently raising ``drop_prob`` with a fixed seed only ever
    removes boxes from the output.
    """
    rng = _frame_rng(noise.seed, frame_id, stream)
    lo, hi = noise.confidence_range
    j = noise.jitter_px
    out = []
    for g in gt:
        u = rng.random(8)
        if u[0] < noise.drop_prob:
            continue
        b = g.box
        jit = (u[1:5] * 2.0 - 1.0) * j
        box = _valid_box(b.xmin + jit[0], b.ymin + jit[1], b.xmax + jit[2], b.ymax + jit[3], dims)
        label = g.label
        if n_classes > 1 and u[5] < noise.misclass_prob:
            other = int(u[6] * (n_classes - 1))
            label = other if other < g.label else other + 1
        conf = lo + (hi - lo) * u[7]
        out.append(Detection(box, label, conf))
    for _ in range(int(rng.poisson(noise.spurious_rate)) if noise.spurious_rate > 0 else 0):
        u = rng.random(6)
        xs = sorted((u[0] * dims.width, u[1] * dims.width))
        ys = sorted((u[2] * dims.height, u[3] * dims.height))
        label = min(int(u[4] * n_classes), n_classes - 1)
        out.append(Detection(Box(xs[0], ys[0], xs[1], ys[1]), label, lo + (hi - lo) * u[5]))
    return out


class Detector(ABC):
    """Stage backend contract.

    ``detect`` returns boxes in the coordinates of ``frame`` with no ordering
    guarantee; confidence thresholding and NMS happen in the cascade. Set
    ``concurrent = False`` on backends that cannot serve parallel calls and
    the cascade will serialize access.
    """

    concurrent = True

    @abstractmethod
    def detect(self, frame: Frame, labels: LabelMap) -> list[Detection]:
        ...


class OracleDetector(BaseEstimator, Detector):
    """Mock detector that replays ground truth through a :class:`NoiseProfile`.

    Parameters
    ----------
    noise : NoiseProfile, default=None
        Noise model; ``None`` means noiseless.
    stream : int, default=0
        Extra RNG salt so several oracles sharing one seed stay independent.
    min_visible : float, default=0.5
        Fraction of a ground-truth box that must fall inside a cropped frame
        for the oracle to report it.

    ``fit`` takes ``{frame_id: [GroundTruthBox, ...]}`` with boxes in
    original-frame coordinates; ``detect`` projects them into whatever crop
    it is shown.
    """

    def __init__(self, noise=None, stream=0, min_visible=0.5):
        self.noise = noise
        self.stream = stream
        self.min_visible = min_visible

    def fit(self, ground_truth: Mapping[int, Sequence[GroundTruthBox]], y=None):
        check_probability(self.min_visible, "min_visible")
        if self.noise is not None and not isinstance(self.noise, NoiseProfile):
            raise ValidationError("noise must be a NoiseProfile")
        self.ground_truth_ = {int(k): tuple(v) for k, v in ground_truth.items()}
        self.calls_ = 0
        self._lock = threading.Lock()
        return self

    def _visible_gt(self, frame: Frame) -> list[GroundTruthBox]:
        out = []
        for g in self.ground_truth_.get(frame.frame_id, ()):
            mapped = frame.from_original(g.box)
            clipped = mapped.clip(frame.dims)
            full = mapped.area
            if full <= 0 or clipped.area <= 0 or clipped.area < self.min_visible * full:
                continue
            out.append(GroundTruthBox(clipped, g.label))
        return out

    def detect(self, frame: Frame, labels: LabelMap) -> list[Detection]:
        check_is_fitted(self, "ground_truth_")
        with self._lock:
            self.calls_ += 1
        noise = self.noise or NOISELESS
        return oracle_detect(self._visible_gt(frame), frame.dims, noise, frame.frame_id,
                             len(labels), stream=self.stream)

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


class ExternalProcessDetector(Detector):
    """Backend that forwards frames to a long-lived child process.

    Protocol: one frame path per request line on the child's stdin; the child
    answers one JSON line
    ``{"detections": [{"box": [x1, y1, x2, y2], "class": k, "conf": c}]}``
    with boxes in that frame's pixel coordinates.
    """

    concurrent = False

    def __init__(self, command: Sequence[str], stage: str = "detector"):
        self.command = list(command)
        self.stage = stage
        self._proc = None
        self._lock = threading.Lock()

    def _ensure_started(self):
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                    text=True, bufsize=1,
                )
            except OSError as exc:
                raise DetectorError(self.stage, f"cannot start backend: {exc}") from exc
        return self._proc

    def _frame_path(self, frame: Frame) -> tuple[str, bool]:
        if frame.path is not None and not frame.chain:
            return frame.path, False
        if frame.image is None:
            raise DetectorError(self.stage, "frame carries neither a path nor pixel data")
        from PIL import Image

        fd, tmp = tempfile.mkstemp(suffix=".png", prefix="tollcascade-")
        os.close(fd)
        Image.fromarray(np.asarray(frame.image)).save(tmp)
        return tmp, True

    def detect(self, frame: Frame, labels: LabelMap) -> list[Detection]:
        path, temporary = self._frame_path(frame)
        try:
            with self._lock:
                proc = self._ensure_started()
                try:
                    proc.stdin.write(path + "\n")
                    proc.stdin.flush()
                    line = proc.stdout.readline()
                except (BrokenPipeError, OSError) as exc:
                    raise DetectorError(self.stage, f"backend I/O failed: {exc}") from exc
            if not line:
                raise DetectorError(self.stage, "backend closed its output")
            return self._decode(line, frame, labels)
        finally:
            if temporary:
                os.unlink(path)

    def _decode(self, line: str, frame: Frame, labels: LabelMap) -> list[Detection]:
        try:
            payload = json.loads(line)
            out = []
            for item in payload["detections"]:
                box = Box.from_seq(item["box"]).clip(frame.dims)
                label = int(item["class"])
                if not 0 <= label < len(labels):
                    raise ValidationError(f"class {label} out of range")
                out.append(Detection(box, label, float(item["conf"])))
            return out
        except (ValueError, KeyError, TypeError) as exc:
            raise DetectorError(self.stage, f"malformed backend reply {line.strip()!r}: {exc}") from exc

    def close(self):
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
