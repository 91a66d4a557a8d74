"""Cascade vehicle-type and licence-plate recognition toolkit for toll collection."""
from .annotations import (
    DatasetManifest,
    GroundTruthBox,
    LabelMap,
    Record,
    StatsReport,
    dataset_stats,
    derive_stage_dataset,
    load_manifest,
    parse_annotation,
    save_manifest,
    split_train_test,
    write_annotation,
)
from .cascade import (
    CascadeRecognizer,
    PipelineConfig,
    PipelineResult,
    assemble_plate,
    compute_toll,
    filter_by_reference,
    run_pipeline,
    select_primary_vehicle,
)
from .detector import Detection, Detector, ExternalProcessDetector, Frame, NoiseProfile, OracleDetector, oracle_detect
from .evaluation import (
    EvalReport,
    MatchResult,
    average_precision,
    end_to_end_accuracy,
    evaluate_detections,
    map50,
    match_detections,
    prf_at_threshold,
)
from .geometry import (
    Box,
    CropRegion,
    FrameDims,
    center_crop_to_aspect,
    intersection_area,
    iou,
    map_child_to_parent,
    map_parent_to_child,
    nms,
    scale_box,
)
from .synthetic import CascadeFixture, load_bundled_fixture, make_cascade_fixture

__version__ = "0.1.0"
