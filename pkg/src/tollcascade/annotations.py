"""Darknet-format ground truth, label maps, dataset manifests and stage derivation.

On-disk manifest layout (darknet conventions)::

    <root>/labels.names       one class name per line, index = line number
    <root>/labels/<id>.txt    "class_id cx cy w h", normalized to [0, 1]
    <root>/images/<id>.*      optional pixel data
    <root>/manifest.json      optional index: dims, split, seed, crop chains

Without ``manifest.json`` the records are discovered by scanning ``labels/``
and frame sizes are read from the matching image headers.
"""
from __future__ import annotations

import json
import os
import string
import tempfile
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import AnnotationParseError, ValidationError
from .geometry import Box, CropRegion, FrameDims

VEHICLE_CLASSES = ("bus", "car", "carry-van", "truck-type1", "truck-type2", "van")
PLATE_CLASSES = ("license-plate",)
CHARACTER_CLASSES = tuple(string.digits + string.ascii_uppercase)

STAGES = ("vehicle", "plate", "character")
_STAGE_SIZES = {"vehicle": 6, "plate": 1, "character": 36}
_NEXT_STAGE = {"vehicle": "plate", "plate": "character"}
_IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class LabelMap:
    names: tuple[str, ...]
    stage: str

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        expected = _STAGE_SIZES[self.stage]
        if len(self.names) != expected:
            raise ValidationError(
                f"{self.stage} label map needs {expected} names, got {len(self.names)}"
            )
        if len(set(self.names)) != len(self.names):
            raise ValidationError("label names must be unique")
        if self.stage == "character" and set(self.names) != set(CHARACTER_CLASSES):
            raise ValidationError("character label map must hold exactly 0-9 and A-Z")

    @classmethod
    def vehicle(cls) -> "LabelMap":
        return cls(VEHICLE_CLASSES, "vehicle")

    @classmethod
    def plate(cls) -> "LabelMap":
        return cls(PLATE_CLASSES, "plate")

    @classmethod
    def character(cls) -> "LabelMap":
        return cls(CHARACTER_CLASSES, "character")

    @classmethod
    def for_stage(cls, stage: str) -> "LabelMap":
        return {"vehicle": cls.vehicle, "plate": cls.plate, "character": cls.character}[stage]()

    @classmethod
    def from_names_text(cls, text: str, stage: str | None = None) -> "LabelMap":
        names = tuple(line.strip() for line in text.splitlines() if line.strip())
        if stage is None:
            stage = next((s for s, n in _STAGE_SIZES.items() if n == len(names)), None)
            if stage is None:
                raise ValidationError(
                    f"cannot infer stage from a label map with {len(names)} names"
                )
        return cls(names, stage)

    def to_names_text(self) -> str:
        return "\n".join(self.names) + "\n"

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, index: int) -> str:
        return self.names[index]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"{name!r} is not a {self.stage} class") from None


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box
    label: int


# (crop in parent coordinates, dims of the child frame the crop became)
CropLink = tuple[CropRegion, FrameDims]


@dataclass(frozen=True)
class Record:
    """One annotated frame. ``crop_chain`` links it back to the original image."""

    id: str
    dims: FrameDims
    boxes: tuple[GroundTruthBox, ...] = ()
    image: str | None = None
    crop_chain: tuple[CropLink, ...] = ()
    parent: str | None = None
    text: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "crop_chain", tuple(self.crop_chain))


@dataclass
class DatasetManifest:
    stage: str
    labels: LabelMap
    records: list[Record] = field(default_factory=list)
    split: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.labels.stage != self.stage:
            raise ValidationError(
                f"manifest stage {self.stage!r} does not match label map stage {self.labels.stage!r}"
            )
        if self.split not in (None, "train", "test"):
            raise ValidationError(f"split must be 'train' or 'test', got {self.split!r}")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValidationError("record ids must be unique within a manifest")
        for rec in self.records:
            _validate_record_boxes(rec, self.labels)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict[str, Record]:
        return {r.id: r for r in self.records}


def _validate_record_boxes(rec: Record, labels: LabelMap, tol: float = 1e-6) -> None:
    for gt in rec.boxes:
        if not 0 <= gt.label < len(labels):
            raise ValidationError(
                f"record {rec.id!r}: class {gt.label} out of range for {labels.stage} labels"
            )
        if not gt.box.inside(rec.dims, tol):
            raise ValidationError(
                f"record {rec.id!r}: box {gt.box.as_tuple()} exceeds frame "
                f"{rec.dims.width}x{rec.dims.height}"
            )


@dataclass(frozen=True)
class StatsReport:
    classes: dict[str, int]
    images: int
    instances: int

    def to_dict(self) -> dict:
        return {"classes": dict(self.classes), "images": self.images, "instances": self.instances}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# --------------------------------------------------------------------------
# darknet text format


def _parse_float(token: str, lineno: int, source) -> float:
    try:
        value = float(token)
    except ValueError:
        raise AnnotationParseError(f"not a number: {token!r}", lineno, source) from None
    if not np.isfinite(value):
        raise AnnotationParseError(f"non-finite value {token!r}", lineno, source)
    return value


def _parse_class(token: str, labels: LabelMap, lineno: int, source) -> int:
    try:
        cls = int(token)
    except ValueError:
        raise AnnotationParseError(f"class id must be an integer: {token!r}", lineno, source) from None
    if not 0 <= cls < len(labels):
        raise ValidationError(
            f"{source or '<annotation>'}:line {lineno}: class {cls} out of range "
            f"for {len(labels)} {labels.stage} classes"
        )
    return cls


def _normalized_to_box(cx, cy, w, h, dims: FrameDims, lineno, source) -> Box:
    for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not 0.0 <= v <= 1.0:
            raise ValidationError(
                f"{source or '<annotation>'}:line {lineno}: {name}={v} outside [0, 1]"
            )
    W, H = dims.width, dims.height
    box = Box((cx - w / 2) * W, (cy - h / 2) * H, (cx + w / 2) * W, (cy + h / 2) * H)
    return box.clip(dims)


def _split_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line:
            yield lineno, line.split()


def parse_annotation(text: str, dims: FrameDims, labels: LabelMap,
                     source: str | None = None) -> list[GroundTruthBox]:
    """Parse darknet ``class cx cy w h`` lines into absolute-pixel boxes."""
    out = []
    for lineno, tokens in _split_lines(text):
        if len(tokens) != 5:
            raise AnnotationParseError(
                f"expected 5 fields 'class cx cy w h', got {len(tokens)}", lineno, source
            )
        cls = _parse_class(tokens[0], labels, lineno, source)
        cx, cy, w, h = (_parse_float(t, lineno, source) for t in tokens[1:])
        out.append(GroundTruthBox(_normalized_to_box(cx, cy, w, h, dims, lineno, source), cls))
    return out


def _box_to_normalized(box: Box, dims: FrameDims) -> tuple[float, float, float, float]:
    W, H = dims.width, dims.height
    return (
        (box.xmin + box.xmax) / 2 / W,
        (box.ymin + box.ymax) / 2 / H,
        box.width / W,
        box.height / H,
    )


def write_annotation(boxes: Iterable[GroundTruthBox], dims: FrameDims, tol: float = 1e-6) -> str:
    lines = []
    for gt in boxes:
        if not gt.box.inside(dims, tol):
            raise ValidationError(
                f"box {gt.box.as_tuple()} lies outside the {dims.width}x{dims.height} frame"
            )
        cx, cy, w, h = _box_to_normalized(gt.box, dims)
        lines.append(f"{int(gt.label)} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
    return "\n".join(lines)


def parse_predictions(text: str, dims: FrameDims, labels: LabelMap, source: str | None = None):
    """Parse ``class cx cy w h conf`` prediction lines into detections."""
    from .detector import Detection

    out = []
    for lineno, tokens in _split_lines(text):
        if len(tokens) != 6:
            raise AnnotationParseError(
                f"expected 6 fields 'class cx cy w h conf', got {len(tokens)}", lineno, source
            )
        cls = _parse_class(tokens[0], labels, lineno, source)
        cx, cy, w, h, conf = (_parse_float(t, lineno, source) for t in tokens[1:])
        if not 0.0 <= conf <= 1.0:
            raise ValidationError(f"{source or '<predictions>'}:line {lineno}: confidence {conf} outside [0, 1]")
        box = _normalized_to_box(cx, cy, w, h, dims, lineno, source)
        out.append(Detection(box, cls, conf))
    return out


def write_predictions(dets, dims: FrameDims) -> str:
    lines = []
    for d in dets:
        cx, cy, w, h = _box_to_normalized(d.box.clip(dims), dims)
        lines.append(f"{int(d.label)} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f} {d.confidence:.6f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# stage derivation, statistics, splitting


def child_record_id(parent_id: str, index: int) -> str:
    return f"{parent_id}_{index}"


def derive_stage_dataset(manifest: DatasetManifest,
                         stage_gt: Mapping[str, Sequence[GroundTruthBox] | str],
                         labels: LabelMap | None = None) -> DatasetManifest:
    """Crop every ground-truth instance into a record of the next stage.

    ``stage_gt`` maps child record ids (see :func:`child_record_id`) to the
    child annotations, either parsed boxes or raw darknet text, expressed in
    the cropped frame.
    """
    child_stage = _NEXT_STAGE.get(manifest.stage)
    if child_stage is None:
        raise ValidationError(f"no stage follows {manifest.stage!r}")
    labels = labels or LabelMap.for_stage(child_stage)
    if labels.stage != child_stage:
        raise ValidationError(f"child labels must be {child_stage!r}, got {labels.stage!r}")
    children = []
    for rec in manifest.records:
        for k, gt in enumerate(rec.boxes):
            cid = child_record_id(rec.id, k)
            crop = CropRegion.from_box(gt.box, rec.dims)
            dims = crop.dims
            if cid not in stage_gt:
                raise ValidationError(f"record {cid!r}: no child annotation supplied")
            ann = stage_gt[cid]
            if isinstance(ann, str):
                boxes = parse_annotation(ann, dims, labels, source=cid)
            else:
                boxes = list(ann)
            child = Record(
                id=cid,
                dims=dims,
                boxes=tuple(boxes),
                image=None,
                crop_chain=rec.crop_chain + ((crop, dims),),
                parent=rec.id,
            )
            _validate_record_boxes(child, labels)
            children.append(child)
    return DatasetManifest(child_stage, labels, children, split=manifest.split, seed=manifest.seed)


def dataset_stats(manifest: DatasetManifest) -> StatsReport:
    counts = Counter(gt.label for rec in manifest.records for gt in rec.boxes)
    classes = {name: counts.get(i, 0) for i, name in enumerate(manifest.labels.names)}
    return StatsReport(classes, len(manifest.records), sum(classes.values()))


def split_train_test(manifest: DatasetManifest, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded random split; 80/20 by default. The seed is stored on both halves."""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(manifest.records)
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx = set(order[:n_test].tolist())
    train = [r for i, r in enumerate(manifest.records) if i not in test_idx]
    test = [r for i, r in enumerate(manifest.records) if i in test_idx]
    return (
        DatasetManifest(manifest.stage, manifest.labels, train, split="train", seed=seed),
        DatasetManifest(manifest.stage, manifest.labels, test, split="test", seed=seed),
    )


# --------------------------------------------------------------------------
# disk I/O


def _chain_to_json(chain) -> list:
    return [
        {
            "box": list(crop.box.as_tuple()),
            "parent": [crop.parent.width, crop.parent.height],
            "child": [dims.width, dims.height],
        }
        for crop, dims in chain
    ]


def _chain_from_json(items) -> tuple:
    out = []
    for item in items:
        parent = FrameDims(*item["parent"])
        out.append((CropRegion(Box.from_seq(item["box"]), parent), FrameDims(*item["child"])))
    return tuple(out)


def atomic_write_text(path: os.PathLike | str, text: str) -> None:
    """Write via a temp file + rename so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_index(manifest: DatasetManifest) -> dict:
    records = []
    for rec in manifest.records:
        item = {"id": rec.id, "width": rec.dims.width, "height": rec.dims.height}
        if rec.image is not None:
            item["image"] = rec.image
        if rec.parent is not None:
            item["parent"] = rec.parent
        if rec.text is not None:
            item["text"] = rec.text
        if rec.crop_chain:
            item["crop_chain"] = _chain_to_json(rec.crop_chain)
        records.append(item)
    return {"stage": manifest.stage, "split": manifest.split, "seed": manifest.seed, "records": records}


def save_manifest(manifest: DatasetManifest, root: os.PathLike | str) -> Path:
    root = Path(root)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    atomic_write_text(root / "labels.names", manifest.labels.to_names_text())
    for rec in manifest.records:
        text = write_annotation(rec.boxes, rec.dims)
        atomic_write_text(root / "labels" / f"{rec.id}.txt", text + "\n" if text else "")
    atomic_write_text(root / "manifest.json", json.dumps(manifest_index(manifest), indent=2) + "\n")
    return root


def read_image_dims(path: os.PathLike | str) -> FrameDims:
    from PIL import Image

    with Image.open(path) as im:
        return FrameDims(*im.size)


def _find_image(images_dir: Path, stem: str) -> Path | None:
    for suffix in _IMAGE_SUFFIXES:
        for cand in (images_dir / f"{stem}{suffix}", images_dir / f"{stem}{suffix.upper()}"):
            if cand.exists():
                return cand
    return None


def load_manifest(root: os.PathLike | str, stage: str | None = None) -> DatasetManifest:
    root = Path(root)
    names_path = root / "labels.names"
    if not names_path.exists():
        raise ValidationError(f"{root}: missing labels.names")
    labels = LabelMap.from_names_text(names_path.read_text(encoding="utf-8"), stage)
    index_path = root / "manifest.json"
    records = []
    split = seed = None
    if index_path.exists():
        index = json.loads(index_path.read_text(encoding="utf-8"))
        if index.get("stage") not in (None, labels.stage):
            raise ValidationError(
                f"{index_path}: stage {index.get('stage')!r} disagrees with labels.names"
            )
        split, seed = index.get("split"), index.get("seed")
        for item in index.get("records", []):
            rid = item["id"]
            dims = FrameDims(item["width"], item["height"])
            label_path = root / "labels" / f"{rid}.txt"
            if not label_path.exists():
                raise ValidationError(f"record {rid!r}: missing annotation {label_path}")
            boxes = parse_annotation(label_path.read_text(encoding="utf-8"), dims, labels,
                                     source=str(label_path))
            records.append(Record(
                id=rid,
                dims=dims,
                boxes=tuple(boxes),
                image=item.get("image"),
                crop_chain=_chain_from_json(item.get("crop_chain", [])),
                parent=item.get("parent"),
                text=item.get("text"),
            ))
    else:
        labels_dir = root / "labels"
        for label_path in sorted(labels_dir.glob("*.txt")) if labels_dir.exists() else []:
            rid = label_path.stem
            image = _find_image(root / "images", rid)
            if image is None:
                raise ValidationError(f"record {rid!r}: no image to read frame size from")
            dims = read_image_dims(image)
            boxes = parse_annotation(label_path.read_text(encoding="utf-8"), dims, labels,
                                     source=str(label_path))
            records.append(Record(rid, dims, tuple(boxes), image=str(image.relative_to(root))))
    return DatasetManifest(labels.stage, labels, records, split=split, seed=seed)


def with_records(manifest: DatasetManifest, records: Sequence[Record]) -> DatasetManifest:
    return replace(manifest, records=list(records))
