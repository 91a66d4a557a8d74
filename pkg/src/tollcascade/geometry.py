"""Axis-aligned box arithmetic and coordinate bookkeeping across crop/resize stages.

Coordinates are continuous pixels with the origin at the top-left corner.
Nothing here rounds except :meth:`CropRegion.from_box`, which snaps a crop to
the pixel grid because a crop is a pixel operation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, TypeVar

from .exceptions import ValidationError
from .validation import check_box_coords, check_positive_int

__all__ = [
    "Box",
    "FrameDims",
    "CropRegion",
    "area",
    "intersection_area",
    "iou",
    "nms",
    "scale_box",
    "map_child_to_parent",
    "map_parent_to_child",
    "center_crop_to_aspect",
    "lift_through_chain",
    "project_through_chain",
]


@dataclass(frozen=True, order=True)
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        coords = check_box_coords((self.xmin, self.ymin, self.xmax, self.ymax))
        for name, value in zip(("xmin", "ymin", "xmax", "ymax"), coords):
            object.__setattr__(self, name, value)

    @classmethod
    def from_seq(cls, coords: Sequence[float]) -> "Box":
        return cls(*check_box_coords(coords))

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.xmin + dx, self.ymin + dy, self.xmax + dx, self.ymax + dy)

    def clip(self, dims: "FrameDims") -> "Box":
        """Clamp to the frame; a box entirely outside collapses onto the border."""
        xmin = min(max(self.xmin, 0.0), dims.width)
        ymin = min(max(self.ymin, 0.0), dims.height)
        xmax = min(max(self.xmax, 0.0), dims.width)
        ymax = min(max(self.ymax, 0.0), dims.height)
        return Box(xmin, ymin, xmax, ymax)

    def inside(self, dims: "FrameDims", tol: float = 0.0) -> bool:
        return (
            self.xmin >= -tol
            and self.ymin >= -tol
            and self.xmax <= dims.width + tol
            and self.ymax <= dims.height + tol
        )

    def contains(self, other: "Box", tol: float = 0.0) -> bool:
        return (
            other.xmin >= self.xmin - tol
            and other.ymin >= self.ymin - tol
            and other.xmax <= self.xmax + tol
            and other.ymax <= self.ymax + tol
        )


@dataclass(frozen=True)
class FrameDims:
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "width", check_positive_int(self.width, "width"))
        object.__setattr__(self, "height", check_positive_int(self.height, "height"))

    def full_box(self) -> Box:
        return Box(0.0, 0.0, float(self.width), float(self.height))


@dataclass(frozen=True)
class CropRegion:
    """A pixel-aligned window of a parent frame.

    The child frame produced by the crop has ``dims`` equal to the window
    extent; any later resize is described separately by the child dims passed
    to :func:`map_child_to_parent`.
    """

    box: Box
    parent: FrameDims

    def __post_init__(self):
        b = self.box
        if not b.inside(self.parent):
            raise ValidationError(
                f"crop {b.as_tuple()} exceeds parent frame "
                f"{self.parent.width}x{self.parent.height}"
            )
        for v in b.as_tuple():
            if v != math.floor(v):
                raise ValidationError(f"crop corners must be integral, got {b.as_tuple()}")
        if b.width < 1 or b.height < 1:
            raise ValidationError(f"crop {b.as_tuple()} has empty extent")

    @classmethod
    def from_box(cls, box: Box, parent: FrameDims) -> "CropRegion":
        """Snap ``box`` outward to whole pixels and clip it to ``parent``.

        A box thinner than one pixel is widened to one pixel so the child
        frame always has positive dimensions.
        """
        b = box.clip(parent)
        # tolerate serialization noise around whole-pixel corners
        xmin, ymin = math.floor(b.xmin + _SNAP_EPS), math.floor(b.ymin + _SNAP_EPS)
        xmax, ymax = math.ceil(b.xmax - _SNAP_EPS), math.ceil(b.ymax - _SNAP_EPS)
        if xmax - xmin < 1:
            xmin, xmax = _widen(xmin, xmax, parent.width)
        if ymax - ymin < 1:
            ymin, ymax = _widen(ymin, ymax, parent.height)
        return cls(Box(xmin, ymin, xmax, ymax), parent)

    @property
    def dims(self) -> FrameDims:
        return FrameDims(int(self.box.width), int(self.box.height))


_SNAP_EPS = 1e-3


def _widen(lo: int, hi: int, limit: int) -> tuple[int, int]:
    hi = lo + 1
    if hi > limit:
        lo, hi = limit - 1, limit
    return lo, hi


def area(box: Box) -> float:
    return box.area


def intersection_area(a: Box, b: Box) -> float:
    """Overlap area of two boxes (0 when they are disjoint or only touch)."""
    _require_box(a)
    _require_box(b)
    w = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    h = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        # both boxes degenerate
        return 0.0
    return min(1.0, max(0.0, inter / union))


def _require_box(box) -> None:
    if not isinstance(box, Box):
        raise ValidationError(f"expected a Box, got {type(box).__name__}")


D = TypeVar("D")


def _detection_order(det) -> tuple:
    return (-det.confidence, det.box.as_tuple(), det.label)


def nms(dets: Iterable[D], iou_threshold: float = 0.3) -> list[D]:
    """Greedy per-class non-maximum suppression.

    Works on any object exposing ``box``, ``label`` and ``confidence``.
    Confidence ties are resolved by ascending corner coordinates, so the
    result does not depend on input order. A candidate survives when its IoU
    with every kept detection of the same class is ``<= iou_threshold``.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValidationError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    kept: list = []
    by_class: dict = {}
    for det in sorted(dets, key=_detection_order):
        same = by_class.setdefault(det.label, [])
        if all(iou(det.box, k.box) <= iou_threshold for k in same):
            same.append(det)
            kept.append(det)
    return kept


def scale_box(box: Box, src: FrameDims, dst: FrameDims) -> Box:
    sx = dst.width / src.width
    sy = dst.height / src.height
    return Box(box.xmin * sx, box.ymin * sy, box.xmax * sx, box.ymax * sy)


def _check_crop(crop: CropRegion) -> None:
    if not isinstance(crop, CropRegion):
        raise ValidationError(f"expected a CropRegion, got {type(crop).__name__}")
    if not crop.box.inside(crop.parent):
        raise ValidationError("crop region is inconsistent with its parent frame")


def map_child_to_parent(box: Box, crop: CropRegion, child_dims: FrameDims | None = None) -> Box:
    """Lift a box from a (possibly resized) crop back into the parent frame."""
    _check_crop(crop)
    extent = crop.dims
    if child_dims is not None and child_dims != extent:
        box = scale_box(box, child_dims, extent)
    return box.translate(crop.box.xmin, crop.box.ymin).clip(crop.parent)


def map_parent_to_child(box: Box, crop: CropRegion, child_dims: FrameDims | None = None,
                        clip: bool = False) -> Box:
    """Inverse of :func:`map_child_to_parent` (without its clipping step)."""
    _check_crop(crop)
    extent = crop.dims
    out = box.translate(-crop.box.xmin, -crop.box.ymin)
    if child_dims is not None and child_dims != extent:
        out = scale_box(out, extent, child_dims)
    if clip:
        out = out.clip(child_dims or extent)
    return out


def center_crop_to_aspect(dims: FrameDims, aspect_w: int = 3, aspect_h: int = 4) -> CropRegion:
    """Largest centered window with ``width:height == aspect_w:aspect_h``."""
    aspect_w = check_positive_int(aspect_w, "aspect_w")
    aspect_h = check_positive_int(aspect_h, "aspect_h")
    w, h = dims.width, dims.height
    if w * aspect_h > h * aspect_w:
        tw = max(1, min(w, round(h * aspect_w / aspect_h)))
        x0 = (w - tw) // 2
        box = Box(x0, 0, x0 + tw, h)
    else:
        th = max(1, min(h, round(w * aspect_h / aspect_w)))
        y0 = (h - th) // 2
        box = Box(0, y0, w, y0 + th)
    return CropRegion(box, dims)


def lift_through_chain(box: Box, chain) -> Box:
    """Map a box from the innermost frame of a crop chain to the original frame."""
    for crop, child_dims in reversed(tuple(chain)):
        box = map_child_to_parent(box, crop, child_dims)
    return box


def project_through_chain(box: Box, chain) -> Box:
    """Map an original-frame box into the innermost frame of a crop chain (unclipped)."""
    for crop, child_dims in chain:
        box = map_parent_to_child(box, crop, child_dims)
    return box
