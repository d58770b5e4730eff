"""Training-free visual grounding: refine, detect, mark, select, evaluate."""

from .geometry import BoundingBox, ImageDims, center, from_normalized_center, from_xywh, iou
from .marking import Candidate, MarkSheet, MarkStyle, RasterImage, assign_marks, lookup, render_marked
from .pipeline import (
    GroundingOutcome,
    GroundingRequest,
    PipelineConfig,
    ground,
    ground_baseline_direct,
    select_primary,
)

__all__ = [
    "BoundingBox",
    "ImageDims",
    "iou",
    "from_xywh",
    "from_normalized_center",
    "center",
    "Candidate",
    "MarkSheet",
    "MarkStyle",
    "RasterImage",
    "assign_marks",
    "lookup",
    "render_marked",
    "GroundingRequest",
    "GroundingOutcome",
    "PipelineConfig",
    "ground",
    "ground_baseline_direct",
    "select_primary",
]

__version__ = "0.1.0"
