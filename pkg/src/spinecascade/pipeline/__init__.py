"""The two-stage cascade and the label counting rule."""

from .anatomy import AnatomicalLabel, Region, count_labels, label_range, parse_label
from .cascade import (
    CascadeParams,
    CascadeResult,
    NetSegmenter,
    NoSpineFound,
    VertebraInstance,
    WorkingInstance,
    assign_anatomical_labels,
    assign_classes,
    finalize,
    preprocess,
    run_cascade,
    spine_roi,
    stage1_infer,
    stage2_iterate,
    write_result,
)
from .oracle import OracleSegmenter, OracleStage1

__all__ = [
    "AnatomicalLabel",
    "CascadeParams",
    "CascadeResult",
    "NetSegmenter",
    "NoSpineFound",
    "OracleSegmenter",
    "OracleStage1",
    "Region",
    "VertebraInstance",
    "WorkingInstance",
    "assign_anatomical_labels",
    "assign_classes",
    "count_labels",
    "finalize",
    "label_range",
    "parse_label",
    "preprocess",
    "run_cascade",
    "spine_roi",
    "stage1_infer",
    "stage2_iterate",
    "write_result",
]
