"""Detection metrics at IoU 0.5 and the end-to-end recognition criterion."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .annotations import GroundTruthBox, LabelMap
from .detector import Detection
from .exceptions import EvaluationError
from .geometry import iou

__all__ = [
    "MatchResult",
    "EvalReport",
    "match_detections",
    "average_precision",
    "map50",
    "prf_at_threshold",
    "prf_over_frames",
    "end_to_end_correct",
    "end_to_end_accuracy",
    "evaluate_detections",
    "aggregate_reports",
]


@dataclass(frozen=True)
class MatchResult:
    # aligned with the input detection order
    verdicts: tuple[bool, ...]
    matched_gt: tuple[int | None, ...]
    gt_matched: tuple[bool, ...]

    @property
    def tp(self) -> int:
        return sum(self.verdicts)

    @property
    def fp(self) -> int:
        return len(self.verdicts) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


def _det_order(d: Detection) -> tuple:
    return (-d.confidence, d.box.as_tuple(), d.label)


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                     iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching: by descending confidence, each detection claims the
    unclaimed same-class ground truth with the highest IoU, provided that IoU
    is strictly greater than ``iou_thresh``.
    """
    order = sorted(range(len(dets)), key=lambda i: _det_order(dets[i]))
    claimed = [False] * len(gts)
    verdicts = [False] * len(dets)
    matched: list[int | None] = [None] * len(dets)
    for i in order:
        d = dets[i]
        best, best_iou = None, iou_thresh
        for j, g in enumerate(gts):
            if claimed[j] or g.label != d.label:
                continue
            o = iou(d.box, g.box)
            if o > best_iou:
                best, best_iou = j, o
        if best is not None:
            claimed[best] = True
            verdicts[i] = True
            matched[i] = best
    return MatchResult(tuple(verdicts), tuple(matched), tuple(claimed))


def _ranked_hits(frames, label: int, iou_thresh: float) -> tuple[list[tuple], int]:
    """(sort key, is_tp) per detection of ``label`` across frames, plus the GT count."""
    scored = []
    n_gt = 0
    for fi, (dets, gts) in enumerate(frames):
        dets = [d for d in dets if d.label == label]
        gts = [g for g in gts if g.label == label]
        n_gt += len(gts)
        m = match_detections(dets, gts, iou_thresh)
        for d, hit in zip(dets, m.verdicts):
            scored.append(((-d.confidence, fi, d.box.as_tuple()), hit))
    scored.sort(key=lambda t: t[0])
    return scored, n_gt


def _pr_curve(hits: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(hits, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(hits, dtype=float))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(float).tiny)
    return recall, precision


def average_precision(frames: Sequence[tuple[Sequence[Detection], Sequence[GroundTruthBox]]],
                      label: int, iou_thresh: float = 0.5,
                      interpolation: str = "all-point") -> float | None:
    """AP of one class over a dataset of ``(detections, ground_truth)`` frames.

    ``interpolation="all-point"`` integrates the monotone precision envelope
    at every recall step; ``"11-point"`` averages the envelope at recall
    0, 0.1, ..., 1. Returns ``None`` when the class has no ground truth.
    """
    scored, n_gt = _ranked_hits(frames, label, iou_thresh)
    if n_gt == 0:
        return None
    if not scored:
        return 0.0
    recall, precision = _pr_curve([hit for _, hit in scored], n_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "all-point":
        prev = np.concatenate(([0.0], recall[:-1]))
        return float(np.sum((recall - prev) * envelope))
    if interpolation == "11-point":
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r - 1e-12
            total += envelope[mask].max() if mask.any() else 0.0
        return float(total / 11)
    raise ValueError(f"unknown interpolation {interpolation!r}")


def map50(per_class_ap: Mapping[str, float | None]) -> float:
    """Unweighted mean over classes whose AP is defined."""
    defined = [v for v in per_class_ap.values() if v is not None]
    if not defined:
        raise EvaluationError("no class has ground truth; mAP is undefined")
    return float(sum(defined) / len(defined))


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def prf_at_threshold(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                     conf_thresh: float = 0.5, iou_thresh: float = 0.5) -> tuple[float, float, float]:
    """Precision, recall and F1 for one frame after the confidence cut."""
    p, r, f1, _ = prf_over_frames([(dets, gts)], conf_thresh, iou_thresh)
    return p, r, f1


def prf_over_frames(frames, conf_thresh: float = 0.5, iou_thresh: float = 0.5):
    """Pooled precision/recall/F1 over ``(detections, ground_truth)`` frames.

    Precision is 1.0 when nothing survives the cut; recall is 0.0 when there
    is no ground truth. Returns ``(p, r, f1, {"tp", "fp", "fn"})``.
    """
    tp = fp = fn = 0
    for dets, gts in frames:
        kept = [d for d in dets if d.confidence >= conf_thresh]
        m = match_detections(kept, gts, iou_thresh)
        tp += m.tp
        fp += m.fp
        fn += m.fn
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 0.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall, _f1(precision, recall), {"tp": tp, "fp": fp, "fn": fn}


def _normalize_plate(text: str | None) -> str:
    return "".join(ch for ch in (text or "").upper() if ch.isalnum())


def end_to_end_correct(result, vehicle_class: str, plate: str) -> bool:
    return (
        result.status == "recognized"
        and result.vehicle_class == vehicle_class
        and _normalize_plate(result.plate_string) == _normalize_plate(plate)
    )


def end_to_end_accuracy(results: Sequence, truth: Sequence[tuple[str, str]]) -> dict[str, float]:
    """Per-vehicle-type share of frames with both type and full plate correct."""
    if len(results) != len(truth):
        raise EvaluationError(
            f"{len(results)} results but {len(truth)} ground-truth records"
        )
    correct: dict[str, int] = {}
    total: dict[str, int] = {}
    for r, (cls, plate) in zip(results, truth):
        total[cls] = total.get(cls, 0) + 1
        correct[cls] = correct.get(cls, 0) + int(end_to_end_correct(r, cls, plate))
    return {cls: correct[cls] / total[cls] for cls in sorted(total)}


@dataclass
class EvalReport:
    per_class_ap: dict[str, float | None]
    map50: float
    precision: float
    recall: float
    f1: float
    end_to_end: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    spread: dict[str, float] | None = None

    def to_dict(self) -> dict:
        out = {
            "per_class_ap": self.per_class_ap,
            "map50": self.map50,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "end_to_end": self.end_to_end,
            "counts": self.counts,
            "seeds": self.seeds,
        }
        if self.spread is not None:
            out["std"] = self.spread
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate_detections(frames, labels: LabelMap, conf_thresh: float = 0.5,
                        iou_thresh: float = 0.5, interpolation: str = "all-point",
                        results=None, truth=None, seeds: Sequence[int] = ()) -> EvalReport:
    """Full report over ``(detections, ground_truth)`` frames.

    AP uses every detection regardless of confidence; precision, recall and
    F1 are taken at ``conf_thresh``. Pass cascade ``results`` with per-frame
    ``truth`` to fill in end-to-end accuracy.
    """
    frames = list(frames)
    per_class = {
        name: average_precision(frames, k, iou_thresh, interpolation)
        for k, name in enumerate(labels.names)
    }
    p, r, f1, counts = prf_over_frames(frames, conf_thresh, iou_thresh)
    counts = dict(counts)
    counts["frames"] = len(frames)
    counts["ground_truth"] = sum(len(g) for _, g in frames)
    counts["detections"] = sum(len(d) for d, _ in frames)
    e2e = end_to_end_accuracy(results, truth) if results is not None else {}
    return EvalReport(per_class, map50(per_class), p, r, f1, e2e, counts, list(seeds))


def aggregate_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean over repeated random splits, with population std in ``spread``."""
    if not reports:
        raise EvaluationError("nothing to aggregate")

    def stats(values):
        arr = np.asarray(values, dtype=float)
        return float(arr.mean()), float(arr.std())

    classes = reports[0].per_class_ap.keys()
    per_class = {}
    for c in classes:
        vals = [r.per_class_ap[c] for r in reports if r.per_class_ap.get(c) is not None]
        per_class[c] = stats(vals)[0] if vals else None
    spread = {}
    means = {}
    for key in ("map50", "precision", "recall", "f1"):
        means[key], spread[key] = stats([getattr(r, key) for r in reports])
    e2e = {}
    for cls in sorted({k for r in reports for k in r.end_to_end}):
        vals = [r.end_to_end[cls] for r in reports if cls in r.end_to_end]
        e2e[cls] = stats(vals)[0]
    counts = {}
    for r in reports:
        for k, v in r.counts.items():
            counts[k] = counts.get(k, 0) + v
    seeds = [s for r in reports for s in r.seeds]
    return EvalReport(per_class, means["map50"], means["precision"], means["recall"],
                      means["f1"], e2e, counts, seeds, spread)
