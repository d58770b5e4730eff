"""End-to-end grounding orchestration.

A full run is three strictly ordered stages: refine the query into subject
phrases, detect candidate boxes for those phrases, then show the marked
image plus the original query to a multimodal selector. Any backend error
or unparseable reply turns into a failed outcome at that stage; failures
are values so an evaluation run can score them and continue.

Also hosts the direct-box baseline (one multimodal call, no detector) and
a detector-only mode that skips both language stages.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field
from typing import Optional

from PIL import Image

from .backends import (
    BackendError,
    ChatBackend,
    DetectionRequest,
    RoleBackends,
    image_to_b64,
)
from .geometry import from_normalized_center
from .marking import Candidate, MarkSheet, MarkStyle, RasterImage, assign_marks, lookup, render_marked
from .protocol import (
    GPT4V_BASELINE,
    TEXT_GROUNDER,
    VISUAL_GROUNDER,
    ParseError,
    RefinedQuery,
    build_messages,
    load_template,
    parse_baseline_box,
    parse_selection,
    parse_subjects,
)

STAGE_TEXT = "text_ground"
STAGE_DETECT = "detect"
STAGE_VISUAL = "visual_ground"
STAGES = (STAGE_TEXT, STAGE_DETECT, STAGE_VISUAL)


@dataclass(frozen=True)
class PipelineConfig:
    """Run settings; defaults follow the reference experimental setup."""

    temperature: float = 0.75
    box_threshold: float = 0.35
    text_threshold: float = 0.25
    mark_style: MarkStyle = MarkStyle()
    ambiguity_suffix_enabled: bool = False
    retry_count: int = 0
    seed: int = 42
    prompt_placement: str = "system"
    force_visual_stage: bool = False
    max_image_side: Optional[int] = None
    prompt_paths: Optional[dict] = None

    def prompt_path(self, role: str):
        if self.prompt_paths:
            return self.prompt_paths.get(role)
        return None


@dataclass(frozen=True)
class GroundingRequest:
    """One image-query pair to ground."""

    image: RasterImage
    image_bytes: bytes  # original encoded form, sent to detector and baseline
    query: str
    config: PipelineConfig = PipelineConfig()

    def __post_init__(self):
        if not self.query.strip():
            raise ValueError("query must be non-empty")

    @classmethod
    def from_file(cls, path, query: str, config: PipelineConfig = PipelineConfig()):
        with open(path, "rb") as f:
            data = f.read()
        return cls(image=RasterImage.decode(data), image_bytes=data, query=query, config=config)


@dataclass
class StageTrace:
    """Everything observed along the way, populated up to the stage reached."""

    refined_query: Optional[RefinedQuery] = None
    mark_sheet: Optional[MarkSheet] = None
    raw_replies: dict = field(default_factory=dict)
    latencies_ms: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    marked_png: Optional[bytes] = None
    short_circuited_no_target: bool = False


@dataclass(frozen=True)
class GroundingOutcome:
    kind: str  # "found" | "no_target" | "failed"
    selected: tuple[Candidate, ...]
    trace: StageTrace
    failure_stage: Optional[str] = None
    failure: Optional[Exception] = None

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(self.selected))
        if self.kind not in ("found", "no_target", "failed"):
            raise ValueError(f"bad outcome kind {self.kind!r}")
        if self.kind == "found" and not self.selected:
            raise ValueError("found outcome needs at least one candidate")
        if self.kind == "failed" and self.failure_stage not in STAGES:
            raise ValueError(f"failed outcome needs a stage, got {self.failure_stage!r}")

    def to_dict(self) -> dict:
        """JSON-ready summary (stable key order handled by the serializer)."""
        out = {
            "kind": self.kind,
            "selected": [
                {
                    "mark_id": c.mark_id,
                    "box_xyxy": list(c.box.as_tuple()),
                    "score": c.score,
                    "phrase": c.phrase,
                }
                for c in self.selected
            ],
        }
        if self.kind == "failed":
            failure_kind = getattr(self.failure, "kind", "parse_failure")
            out["failure"] = {
                "stage": self.failure_stage,
                "kind": failure_kind,
                "detail": str(self.failure),
            }
        trace = {
            "subjects": list(self.trace.refined_query.subjects) if self.trace.refined_query else None,
            "candidate_count": len(self.trace.mark_sheet) if self.trace.mark_sheet is not None else None,
            "warnings": list(self.trace.warnings),
            "short_circuited_no_target": self.trace.short_circuited_no_target,
        }
        out["trace"] = trace
        return out


def _failed(stage: str, error: Exception, trace: StageTrace) -> GroundingOutcome:
    return GroundingOutcome(kind="failed", selected=(), trace=trace, failure_stage=stage, failure=error)


def _downscale_png(image: RasterImage, max_side: Optional[int]) -> bytes:
    if max_side is None or max(image.width, image.height) <= max_side:
        return image.to_png()
    ratio = max_side / max(image.width, image.height)
    new_size = (max(1, round(image.width * ratio)), max(1, round(image.height * ratio)))
    im = Image.frombytes("RGB", (image.width, image.height), image.pixels)
    buf = io.BytesIO()
    im.resize(new_size, Image.BILINEAR).save(buf, format="PNG")
    return buf.getvalue()


def ground(request: GroundingRequest, backends: RoleBackends) -> GroundingOutcome:
    """Run the three stages in order and map the selection back to boxes.

    Stage 3 always receives the original raw query, never the refined one;
    the refinement exists only to feed the detector. Zero detections
    short-circuit to a no-target verdict without spending a selector call
    (unless configured otherwise). Mark ids the selector invents are
    dropped with a warning; if none survive, the run fails at the
    selection stage.
    """
    config = request.config
    trace = StageTrace()

    # stage 1: refine the query into detector-friendly subject phrases
    template = load_template(
        TEXT_GROUNDER,
        path=config.prompt_path(TEXT_GROUNDER),
        ambiguity_suffix_enabled=config.ambiguity_suffix_enabled,
    )
    chat_request = build_messages(
        TEXT_GROUNDER,
        template,
        request.query,
        temperature=config.temperature,
        prompt_placement=config.prompt_placement,
    )
    started = time.perf_counter()
    try:
        reply = backends.text_grounder.chat(chat_request)
    except BackendError as error:
        return _failed(STAGE_TEXT, error, trace)
    trace.latencies_ms[STAGE_TEXT] = (time.perf_counter() - started) * 1000.0
    trace.raw_replies[STAGE_TEXT] = reply.text
    try:
        refined = parse_subjects(reply.text)
    except ParseError as error:
        return _failed(STAGE_TEXT, error, trace)
    trace.refined_query = refined

    # stage 2: detect candidates for all subjects in one call, then mark
    detection_request = DetectionRequest(
        image_b64=image_to_b64(request.image_bytes),
        phrases=refined.subjects,
        box_threshold=config.box_threshold,
        text_threshold=config.text_threshold,
    )
    started = time.perf_counter()
    try:
        detections = backends.detector.detect(detection_request)
    except BackendError as error:
        return _failed(STAGE_DETECT, error, trace)
    trace.latencies_ms[STAGE_DETECT] = (time.perf_counter() - started) * 1000.0
    boxes = [
        (from_normalized_center(*d.bbox, detections.image_dims), d.score, d.phrase)
        for d in detections.detections
    ]
    sheet = assign_marks(boxes, request.image.dims)
    trace.mark_sheet = sheet
    if len(sheet) == 0 and not config.force_visual_stage:
        trace.short_circuited_no_target = True
        return GroundingOutcome(kind="no_target", selected=(), trace=trace)

    # stage 3: marked image + original query to the multimodal selector
    marked = render_marked(request.image, sheet, config.mark_style)
    marked_png = _downscale_png(marked, config.max_image_side)
    trace.marked_png = marked_png
    vg_template = load_template(VISUAL_GROUNDER, path=config.prompt_path(VISUAL_GROUNDER))
    chat_request = build_messages(
        VISUAL_GROUNDER,
        vg_template,
        request.query,
        image_png=marked_png,
        temperature=config.temperature,
        prompt_placement=config.prompt_placement,
    )
    started = time.perf_counter()
    try:
        reply = backends.visual_grounder.chat(chat_request)
    except BackendError as error:
        return _failed(STAGE_VISUAL, error, trace)
    trace.latencies_ms[STAGE_VISUAL] = (time.perf_counter() - started) * 1000.0
    trace.raw_replies[STAGE_VISUAL] = reply.text
    try:
        selection = parse_selection(reply.text)
    except ParseError as error:
        return _failed(STAGE_VISUAL, error, trace)

    if selection.kind == "no_target":
        return GroundingOutcome(kind="no_target", selected=(), trace=trace)
    selected = []
    for mark_id in selection.ids:
        candidate = lookup(sheet, mark_id)
        if candidate is None:
            trace.warnings.append(f"dropped unknown mark id {mark_id}")
        else:
            selected.append(candidate)
    if not selected:
        return _failed(
            STAGE_VISUAL,
            ParseError(f"every selected id is absent from the mark sheet: {list(selection.ids)}"),
            trace,
        )
    return GroundingOutcome(kind="found", selected=tuple(selected), trace=trace)


def ground_baseline_direct(request: GroundingRequest, chat_backend: ChatBackend) -> GroundingOutcome:
    """Single multimodal call that asks directly for a box, no detector."""
    config = request.config
    trace = StageTrace()
    template = load_template(GPT4V_BASELINE, path=config.prompt_path(GPT4V_BASELINE))
    media_type = "image/png" if request.image_bytes[:8] == b"\x89PNG\r\n\x1a\n" else "image/jpeg"
    chat_request = build_messages(
        GPT4V_BASELINE,
        template,
        request.query,
        image_png=request.image_bytes,
        image_media_type=media_type,
        temperature=config.temperature,
        prompt_placement=config.prompt_placement,
    )
    started = time.perf_counter()
    try:
        reply = chat_backend.chat(chat_request)
    except BackendError as error:
        return _failed(STAGE_VISUAL, error, trace)
    trace.latencies_ms[STAGE_VISUAL] = (time.perf_counter() - started) * 1000.0
    trace.raw_replies[STAGE_VISUAL] = reply.text
    try:
        parsed = parse_baseline_box(reply.text, request.image.dims)
    except ParseError as error:
        return _failed(STAGE_VISUAL, error, trace)
    candidate = Candidate(mark_id=1, box=parsed.box, score=1.0, phrase=request.query)
    return GroundingOutcome(kind="found", selected=(candidate,), trace=trace)


def ground_detector_only(request: GroundingRequest, backends: RoleBackends) -> GroundingOutcome:
    """Detector baseline: the raw query goes straight in as one phrase."""
    config = request.config
    trace = StageTrace()
    detection_request = DetectionRequest(
        image_b64=image_to_b64(request.image_bytes),
        phrases=(request.query,),
        box_threshold=config.box_threshold,
        text_threshold=config.text_threshold,
    )
    started = time.perf_counter()
    try:
        detections = backends.detector.detect(detection_request)
    except BackendError as error:
        return _failed(STAGE_DETECT, error, trace)
    trace.latencies_ms[STAGE_DETECT] = (time.perf_counter() - started) * 1000.0
    boxes = [
        (from_normalized_center(*d.bbox, detections.image_dims), d.score, d.phrase)
        for d in detections.detections
    ]
    sheet = assign_marks(boxes, request.image.dims)
    trace.mark_sheet = sheet
    if len(sheet) == 0:
        trace.short_circuited_no_target = True
        return GroundingOutcome(kind="no_target", selected=(), trace=trace)
    return GroundingOutcome(kind="found", selected=sheet.candidates, trace=trace)


def select_primary(outcome: GroundingOutcome) -> Optional[Candidate]:
    """The most probable box: highest detector score, ties to lowest id."""
    if outcome.kind != "found":
        return None
    return max(outcome.selected, key=lambda c: (c.score, -c.mark_id))
