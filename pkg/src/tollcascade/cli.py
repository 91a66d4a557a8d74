"""Command-line entry point: ``tollcascade {run,eval,stats,derive-stages,simulate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import annotations as ann
from .cascade import STATUSES
from .config import load_config, noise_to_spec
from .detector import Detection, ExternalProcessDetector, Frame
from .evaluation import aggregate_reports, end_to_end_accuracy, evaluate_detections
from .exceptions import (
    ConfigurationError,
    DetectorError,
    EvaluationError,
    PipelineError,
    ValidationError,
)
from .geometry import Box
from .simulation import build_recognizer, oracle_backends, parse_noise_spec, simulate
from .synthetic import STAGE_DIRS, CascadeFixture, bundled_fixture_path, make_cascade_fixture

log = logging.getLogger("tollcascade")

_IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff"}


def _ref_box(text):
    try:
        return Box.from_seq([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--ref-box expects x1,y1,x2,y2: {exc}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _is_fixture(path: Path) -> bool:
    return all((path / d).is_dir() for d in STAGE_DIRS)


def _recognizer_params(args, cfg) -> dict:
    params = {}
    for key in ("conf_thresh", "nms_thresh", "input_size", "tariff"):
        if key in cfg:
            params[key] = tuple(cfg[key]) if key == "input_size" else cfg[key]
    if "ref_box" in cfg and cfg["ref_box"] is not None:
        params["ref_box"] = Box.from_seq(cfg["ref_box"])
    if getattr(args, "conf_thresh", None) is not None:
        params["conf_thresh"] = args.conf_thresh
    if getattr(args, "nms_thresh", None) is not None:
        params["nms_thresh"] = args.nms_thresh
    if getattr(args, "ref_box", None) is not None:
        params["ref_box"] = args.ref_box
    return params


def _noise(args, cfg, spec: str | None = None):
    base = parse_noise_spec(noise_to_spec(cfg.get("noise")))
    return parse_noise_spec(spec or "", base)


def _image_frames(root: Path) -> list[Frame]:
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    return [Frame(i, ann.read_image_dims(p), path=str(p)) for i, p in enumerate(paths)]


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    params = _recognizer_params(args, cfg)
    params["n_jobs"] = args.jobs
    inp = Path(args.input)
    fixture = None
    if _is_fixture(inp):
        fixture = CascadeFixture.load(inp)
        frames = fixture.frames(inp / "vehicle")
    elif inp.is_dir():
        frames = _image_frames(inp)
    else:
        raise ValidationError(f"{inp}: not a fixture or image directory")
    log.debug("running %d frames from %s", len(frames), inp)

    externals = []
    if cfg.get("backends"):
        externals = [ExternalProcessDetector(cfg["backends"][s], stage=s) for s in STAGE_DIRS]
        backends = dict(zip(STAGE_DIRS, externals))
    else:
        if fixture is None:
            raise ConfigurationError("oracle backends need a fixture with ground truth; "
                                     "configure 'backends' to run on raw images")
        seed = args.seed[0] if args.seed else None
        backends = oracle_backends(fixture, _noise(args, cfg, args.noise[0] if args.noise else None), seed)
    try:
        model = build_recognizer(backends, **params)
        results = model.predict(frames)
    finally:
        for ext in externals:
            ext.close()

    lines = [json.dumps(r.to_dict(timings=not args.omit_timings)) for r in results]
    status = Counter(r.status for r in results)
    summary = {
        "frames": len(results),
        "status": {s: status.get(s, 0) for s in STATUSES},
        "recognized_by_type": dict(sorted(Counter(
            r.vehicle_class for r in results if r.recognized).items())),
        "toll_total": sum(r.toll for r in results if r.recognized),
    }
    if fixture is not None:
        summary["end_to_end"] = end_to_end_accuracy(results, fixture.truth(params.get("ref_box")))
    lines.append(json.dumps({"summary": summary}))
    ann.atomic_write_text(args.output, "\n".join(lines) + "\n")
    return 0


def _load_predictions(root: Path, manifest: ann.DatasetManifest):
    frames = []
    for rec in manifest.records:
        path = root / f"{rec.id}.txt"
        dets = []
        if path.exists():
            dets = ann.parse_predictions(path.read_text(encoding="utf-8"), rec.dims,
                                         manifest.labels, source=str(path))
        frames.append((dets, list(rec.boxes)))
    return frames


def _results_as_frames(results, fixture: CascadeFixture):
    frames = []
    for rec, r in zip(fixture.vehicles.records, results):
        dets = []
        if r.get("vehicle"):
            v = r["vehicle"]
            dets = [Detection(Box.from_seq(v["box"]), fixture.vehicles.labels.index(v["class"]), v["conf"])]
        frames.append((dets, list(rec.boxes)))
    return frames


class _ResultView:
    def __init__(self, d):
        self.status = d["status"]
        self.vehicle_class = (d.get("vehicle") or {}).get("class")
        self.plate_string = d.get("plate_string", "")


def cmd_eval(args) -> int:
    inp = Path(args.input)
    conf = 0.5 if args.conf_thresh is None else args.conf_thresh
    reports = []
    if args.results:
        if not _is_fixture(inp):
            raise ValidationError("--results needs --input to be a cascade fixture directory")
        fixture = CascadeFixture.load(inp)
        for k, path in enumerate(args.results):
            rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
            rows = [r for r in rows if "summary" not in r]
            if len(rows) != len(fixture):
                raise EvaluationError(f"{path}: {len(rows)} results for {len(fixture)} frames")
            seeds = [args.seed[k]] if k < len(args.seed) else []
            reports.append(evaluate_detections(
                _results_as_frames(rows, fixture), fixture.vehicles.labels, conf, args.iou_thresh,
                args.interpolation, results=[_ResultView(r) for r in rows],
                truth=fixture.truth(), seeds=seeds,
            ))
    else:
        if not args.predictions:
            raise ValidationError("eval needs --predictions DIR or --results FILE")
        manifest = ann.load_manifest(inp)
        for k, pred in enumerate(args.predictions):
            pred = Path(pred)
            if not pred.is_dir():
                raise ValidationError(f"{pred}: predictions directory not found")
            seeds = [args.seed[k]] if k < len(args.seed) else []
            reports.append(evaluate_detections(
                _load_predictions(pred, manifest), manifest.labels, conf, args.iou_thresh,
                args.interpolation, seeds=seeds,
            ))
    report = reports[0] if len(reports) == 1 else aggregate_reports(reports)
    ann.atomic_write_text(args.output, report.to_json() + "\n")
    return 0


def cmd_stats(args) -> int:
    inp = Path(args.input)
    if _is_fixture(inp):
        fixture = CascadeFixture.load(inp)
        out = {
            stage: ann.dataset_stats(m).to_dict()
            for stage, m in zip(STAGE_DIRS, (fixture.vehicles, fixture.plates, fixture.characters))
        }
    else:
        out = ann.dataset_stats(ann.load_manifest(inp)).to_dict()
    ann.atomic_write_text(args.output, _dump(out))
    return 0


def _crop_images(parent_root: Path, parent: ann.DatasetManifest, child: ann.DatasetManifest,
                 out_root: Path) -> ann.DatasetManifest:
    from PIL import Image

    by_id = parent.by_id()
    records = []
    for rec in child.records:
        src = by_id[rec.parent]
        if src.image is None:
            records.append(rec)
            continue
        crop = rec.crop_chain[-1][0]
        dest = Path("images") / f"{rec.id}.png"
        (out_root / "images").mkdir(parents=True, exist_ok=True)
        with Image.open(parent_root / src.image) as im:
            im.crop(tuple(int(v) for v in crop.box.as_tuple())).save(out_root / dest)
        records.append(ann.Record(rec.id, rec.dims, rec.boxes, str(dest), rec.crop_chain, rec.parent, rec.text))
    return ann.with_records(child, records)


def cmd_derive(args) -> int:
    parent_root = Path(args.input)
    parent = ann.load_manifest(parent_root)
    labels_dir = Path(args.labels)
    names = labels_dir / "labels.names"
    child_stage = {"vehicle": "plate", "plate": "character"}.get(parent.stage)
    if child_stage is None:
        raise ValidationError(f"{parent_root}: no stage follows {parent.stage!r}")
    labels = (ann.LabelMap.from_names_text(names.read_text(encoding="utf-8"), child_stage)
              if names.exists() else ann.LabelMap.for_stage(child_stage))
    stage_gt = {}
    for rec in parent.records:
        for k in range(len(rec.boxes)):
            cid = ann.child_record_id(rec.id, k)
            path = labels_dir / f"{cid}.txt"
            if not path.exists():
                raise ValidationError(f"record {cid!r}: missing child annotation {path}")
            stage_gt[cid] = ann.parse_annotation(
                path.read_text(encoding="utf-8"),
                ann.CropRegion.from_box(rec.boxes[k].box, rec.dims).dims, labels, source=str(path),
            )
    child = ann.derive_stage_dataset(parent, stage_gt, labels)
    out = Path(args.output)
    child = _crop_images(parent_root, parent, child, out)
    ann.save_manifest(child, out)
    return 0


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    params = _recognizer_params(args, cfg)
    params["n_jobs"] = args.jobs
    if args.synthetic:
        fixture = make_cascade_fixture(args.synthetic, seed=args.fixture_seed)
    else:
        fixture = CascadeFixture.load(Path(args.input) if args.input else bundled_fixture_path())
    grid = [_noise(args, cfg, spec) for spec in (args.noise or [""])]
    seeds = args.seed or [0]
    table = simulate(fixture, seeds, grid, **params)
    ann.atomic_write_text(args.output, _dump(table))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tollcascade", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_input=True):
        p.add_argument("--input", required=needs_input, help="input directory")
        p.add_argument("--output", required=True, help="output file")
        p.add_argument("--config", help="YAML config file")

    def pipeline_flags(p):
        p.add_argument("--conf-thresh", type=float)
        p.add_argument("--nms-thresh", type=float)
        p.add_argument("--ref-box", type=_ref_box, help="x1,y1,x2,y2 in original-frame pixels")
        p.add_argument("--seed", type=int, action="append", default=[])
        p.add_argument("--noise", action="append",
                       help="drop=F,jitter=F,misclass=F,spurious=F[,conf=LO:HI]; prefix a key "
                            "with 'vehicle.', 'plate.' or 'character.' to target one stage")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")

    p = sub.add_parser("run", help="run the cascade over a fixture or image directory")
    common(p)
    pipeline_flags(p)
    p.add_argument("--omit-timings", action="store_true",
                   help="leave wall-clock timings out so outputs are reproducible")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--predictions", action="append",
                   help="directory of 'class cx cy w h conf' files; repeat per split/seed")
    p.add_argument("--results", action="append", help="NDJSON written by 'run'")
    p.add_argument("--conf-thresh", type=float)
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--interpolation", choices=("all-point", "11-point"), default="all-point")
    p.add_argument("--seed", type=int, action="append", default=[])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="per-class instance counts")
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("derive-stages", help="crop ground truth into the next stage's dataset")
    common(p)
    p.add_argument("--labels", required=True, help="child annotations named <parent>_<k>.txt")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("simulate", help="oracle cascade over a seed x noise grid")
    common(p, needs_input=False)
    pipeline_flags(p)
    p.add_argument("--synthetic", type=int, metavar="N",
                   help="generate an N-frame fixture instead of loading one")
    p.add_argument("--fixture-seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigurationError, PipelineError, DetectorError,
            EvaluationError, OSError, json.JSONDecodeError) as exc:
        print(f"tollcascade {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
