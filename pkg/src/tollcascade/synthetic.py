"""Synthetic nested ground truth: frames with one vehicle, its plate, and the plate's characters.

The three stage manifests are produced exactly as a real dataset would be:
vehicle boxes on the full frame, plate boxes on each vehicle crop, character
boxes on each plate crop, with :func:`derive_stage_dataset` doing the
cropping.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotations import (
    DatasetManifest,
    GroundTruthBox,
    LabelMap,
    Record,
    child_record_id,
    derive_stage_dataset,
    load_manifest,
    save_manifest,
    with_records,
)
from .cascade import assemble_plate
from .detector import Detection, Frame
from .exceptions import ValidationError
from .geometry import Box, FrameDims, intersection_area, lift_through_chain

STAGE_DIRS = ("vehicle", "plate", "character")


@dataclass
class CascadeFixture:
    vehicles: DatasetManifest
    plates: DatasetManifest
    characters: DatasetManifest

    def __len__(self) -> int:
        return len(self.vehicles)

    def frames(self, root: Path | None = None) -> list[Frame]:
        out = []
        for i, rec in enumerate(self.vehicles.records):
            path = None
            if rec.image is not None:
                path = str(Path(root) / rec.image) if root is not None else rec.image
            out.append(Frame(i, rec.dims, path=path))
        return out

    def ground_truth(self, stage: str) -> dict[int, list[GroundTruthBox]]:
        """Per-frame ground truth of ``stage`` lifted into original-frame pixels."""
        manifest = {"vehicle": self.vehicles, "plate": self.plates, "character": self.characters}[stage]
        frame_of = {rec.id: i for i, rec in enumerate(self.vehicles.records)}
        parents = {r.id: r.parent for r in (*self.plates.records, *self.characters.records)}
        out: dict[int, list[GroundTruthBox]] = {i: [] for i in frame_of.values()}
        for rec in manifest.records:
            root = rec.id
            while root not in frame_of:
                root = parents.get(root)
                if root is None:
                    raise ValidationError(f"record {rec.id!r} has no root frame")
            for g in rec.boxes:
                out[frame_of[root]].append(GroundTruthBox(lift_through_chain(g.box, rec.crop_chain), g.label))
        return out

    def plate_text(self, vehicle_record: Record, index: int) -> str:
        cid = child_record_id(child_record_id(vehicle_record.id, index), 0)
        rec = self.characters.by_id().get(cid)
        if rec is None:
            return ""
        if rec.text is not None:
            return rec.text
        return assemble_plate([Detection(g.box, g.label) for g in rec.boxes], self.characters.labels)

    def truth(self, ref_box: Box | None = None) -> list[tuple[str, str]]:
        """Expected ``(vehicle class, plate string)`` per frame.

        With a reference box the expected vehicle is the one overlapping it
        most; otherwise the first annotated vehicle.
        """
        out = []
        names = self.vehicles.labels.names
        for rec in self.vehicles.records:
            if not rec.boxes:
                out.append(("", ""))
                continue
            k = 0
            if ref_box is not None:
                overlaps = [intersection_area(g.box, ref_box) for g in rec.boxes]
                k = int(np.argmax(overlaps))
            out.append((names[rec.boxes[k].label], self.plate_text(rec, k)))
        return out

    def save(self, root) -> Path:
        root = Path(root)
        for name, manifest in zip(STAGE_DIRS, (self.vehicles, self.plates, self.characters)):
            save_manifest(manifest, root / name)
        return root

    @classmethod
    def load(cls, root) -> "CascadeFixture":
        root = Path(root)
        missing = [d for d in STAGE_DIRS if not (root / d).is_dir()]
        if missing:
            raise ValidationError(f"{root}: missing stage directories {missing}")
        return cls(*(load_manifest(root / d, d) for d in STAGE_DIRS))


def _char_row(names: Sequence[str], x0: float, x1: float, y0: int, y1: int) -> list[tuple[str, Box]]:
    slot = (x1 - x0) / len(names)
    out = []
    for k, ch in enumerate(names):
        a = int(round(x0 + k * slot))
        b = int(round(x0 + (k + 1) * slot)) - 1
        out.append((ch, Box(a, y0, max(b, a + 1), y1)))
    return out


def make_cascade_fixture(n_frames: int = 60, seed: int = 0,
                         frame_size: tuple[int, int] = (416, 416)) -> CascadeFixture:
    """Generate ``n_frames`` frames cycling through the six vehicle types."""
    rng = np.random.default_rng(seed)
    W, H = frame_size
    vlabels, clabels = LabelMap.vehicle(), LabelMap.character()
    vehicle_records, plate_gt, char_gt, texts = [], {}, {}, {}
    for i in range(n_frames):
        rid = f"frame{i:04d}"
        vw = int(W * rng.uniform(0.55, 0.9))
        vh = int(H * rng.uniform(0.55, 0.9))
        vx = int(rng.integers(0, W - vw + 1))
        vy = int(rng.integers(0, H - vh + 1))
        vehicle_records.append(Record(rid, FrameDims(W, H), (GroundTruthBox(Box(vx, vy, vx + vw, vy + vh), i % 6),)))

        two_rows = bool(rng.random() < 0.35)
        pw = int(vw * rng.uniform(0.32, 0.45))
        ph = max(14, int(pw * (0.55 if two_rows else 0.3)))
        px = int(rng.integers(0, vw - pw + 1))
        py = int(rng.integers(vh // 2, vh - ph + 1))
        pid = child_record_id(rid, 0)
        plate_gt[pid] = [GroundTruthBox(Box(px, py, px + pw, py + ph), 0)]

        letters = "".join(rng.choice(list(string.ascii_uppercase), size=int(rng.integers(2, 4))))
        digits = "".join(rng.choice(list(string.digits), size=int(rng.integers(3, 5))))
        margin = max(1.0, 0.05 * pw)
        if two_rows:
            mid = ph // 2
            layout = _char_row(letters, margin, pw - margin, 1, mid - 1)
            layout += _char_row(digits, margin, pw - margin, mid + 1, ph - 1)
        else:
            layout = _char_row(letters + digits, margin, pw - margin, int(0.15 * ph), int(round(0.85 * ph)))
        cid = child_record_id(pid, 0)
        char_gt[cid] = [GroundTruthBox(b, clabels.index(ch)) for ch, b in layout]
        texts[cid] = letters + digits

    vehicles = DatasetManifest("vehicle", vlabels, vehicle_records, seed=seed)
    plates = derive_stage_dataset(vehicles, plate_gt)
    chars = derive_stage_dataset(plates, char_gt)
    chars = with_records(chars, [replace(r, text=texts[r.id]) for r in chars.records])
    return CascadeFixture(vehicles, plates, chars)


def bundled_fixture_path() -> Path:
    return Path(__file__).parent / "data" / "fixture60"


def load_bundled_fixture() -> CascadeFixture:
    """The shipped 60-frame fixture (10 frames per vehicle type)."""
    return CascadeFixture.load(bundled_fixture_path())
