"""Dataset ingestion, deterministic sampling, scoring, and report emission.

Records live in a neutral JSONL schema (one object per line: id, image,
query, gt boxes as [x, y, w, h] pixels, split). Scoring follows the
errors-count-as-misses policy: a failed run scores IoU 0, a correct
no-target verdict on an empty-ground-truth record scores 1, and accuracy
thresholds are strict (IoU must exceed them).
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backends import ChatBackend, RoleBackends
from .geometry import BoundingBox, InvalidBoxError, from_xywh, iou
from .marking import RasterImage
from .pipeline import (
    GroundingOutcome,
    GroundingRequest,
    PipelineConfig,
    ground,
    ground_baseline_direct,
    ground_detector_only,
    select_primary,
)

ACC_THRESHOLDS = (0.25, 0.5)
MODES = ("pipeline", "baseline-direct", "detector-only")


class DatasetError(Exception):
    """A dataset file that cannot be loaded; carries per-line messages."""

    def __init__(self, path, line_errors: Sequence[str]):
        self.path = str(path)
        self.line_errors = list(line_errors)
        summary = "; ".join(self.line_errors[:5])
        more = f" (+{len(self.line_errors) - 5} more)" if len(self.line_errors) > 5 else ""
        super().__init__(f"{path}: {summary}{more}")


class EvalSetupError(Exception):
    """Configuration or input trouble that aborts a run before scoring."""


@dataclass(frozen=True)
class DatasetRecord:
    record_id: str
    image_path: str
    query: str
    ground_truth: tuple[BoundingBox, ...]  # empty means a zero-object record
    split: str


@dataclass(frozen=True)
class EvalRecord:
    record_id: str
    outcome_kind: str
    iou: float
    correct_at_25: bool
    correct_at_50: bool
    failure_stage: Optional[str] = None
    latencies_ms: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ReportRow:
    method: str
    split: str
    miou: float
    acc25: float
    acc50: float
    n: int


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[ReportRow, ...]
    config: dict
    seed: int
    failure_histogram: dict

    def to_canonical_dict(self) -> dict:
        """Deterministic JSON body; deliberately carries no timestamps."""
        return {
            "rows": [
                {
                    "method": r.method,
                    "split": r.split,
                    "miou": round(r.miou, 9),
                    "acc25": round(r.acc25, 9),
                    "acc50": round(r.acc50, 9),
                    "n": r.n,
                }
                for r in self.rows
            ],
            "config": self.config,
            "seed": self.seed,
            "failure_histogram": dict(sorted(self.failure_histogram.items())),
        }


def load_dataset(path) -> list[DatasetRecord]:
    """Read a JSONL dataset; any malformed line fails the whole load.

    Every offending line is reported with its number so fixes are one pass.
    """
    records = []
    errors = []
    seen_ids: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(f"line {lineno}: invalid JSON ({exc.msg})")
                continue
            try:
                boxes = tuple(from_xywh(*map(float, g)) for g in obj["gt"])
                record_id = str(obj["id"])
                if record_id in seen_ids:
                    errors.append(
                        f"line {lineno}: duplicate id {record_id!r} (first on line {seen_ids[record_id]})"
                    )
                    continue
                seen_ids[record_id] = lineno
                records.append(
                    DatasetRecord(
                        record_id=record_id,
                        image_path=str(obj["image"]),
                        query=str(obj["query"]),
                        ground_truth=boxes,
                        split=str(obj["split"]),
                    )
                )
            except KeyError as exc:
                errors.append(f"line {lineno}: missing key {exc}")
            except (TypeError, ValueError, InvalidBoxError) as exc:
                errors.append(f"line {lineno}: bad record ({exc})")
    if errors:
        raise DatasetError(path, errors)
    return records


def sample(records: Sequence[DatasetRecord], n: int, seed: int) -> list[DatasetRecord]:
    """Draw n records without replacement, deterministically.

    The PCG64 stream makes the draw stable across runs and platforms for a
    fixed (file order, n, seed).
    """
    if n > len(records):
        raise ValueError(f"cannot sample {n} of {len(records)} records")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))[:n]
    return [records[i] for i in order]


def greedy_multi_iou(predicted: Sequence[BoundingBox], truth: Sequence[BoundingBox]) -> float:
    """Mean over ground-truth boxes of greedily matched one-to-one IoU.

    Pairs are taken in descending IoU order; unmatched truth contributes 0.
    Greedy is deterministic and cheap; it can under-shoot the optimal
    assignment on adversarial layouts, which the test suite measures.
    """
    if not truth:
        return 0.0
    pairs = sorted(
        ((iou(p, t), pi, ti) for pi, p in enumerate(predicted) for ti, t in enumerate(truth)),
        key=lambda item: (-item[0], item[1], item[2]),
    )
    used_pred: set[int] = set()
    used_truth: set[int] = set()
    total = 0.0
    for value, pi, ti in pairs:
        if value <= 0.0:
            break
        if pi in used_pred or ti in used_truth:
            continue
        used_pred.add(pi)
        used_truth.add(ti)
        total += value
    return total / len(truth)


def score_record(record: DatasetRecord, outcome: GroundingOutcome) -> EvalRecord:
    """Score one outcome against its record's ground truth.

    Failures score 0 outright. Zero-object records score 1 only for an
    explicit no-target verdict. Single-box records score the most probable
    selected box; multi-box records score the greedy matching mean.
    """
    if outcome.kind == "failed":
        value = 0.0
    elif not record.ground_truth:
        value = 1.0 if outcome.kind == "no_target" else 0.0
    elif len(record.ground_truth) == 1:
        primary = select_primary(outcome)
        value = iou(primary.box, record.ground_truth[0]) if primary else 0.0
    else:
        predicted = [c.box for c in outcome.selected]
        value = greedy_multi_iou(predicted, record.ground_truth)
    return EvalRecord(
        record_id=record.record_id,
        outcome_kind=outcome.kind,
        iou=value,
        correct_at_25=value > ACC_THRESHOLDS[0],
        correct_at_50=value > ACC_THRESHOLDS[1],
        failure_stage=outcome.failure_stage,
        latencies_ms=dict(outcome.trace.latencies_ms),
    )


def aggregate(eval_records: Sequence[EvalRecord], method: str = "", split: str = "") -> ReportRow:
    """Fold scored records into one report row."""
    if not eval_records:
        raise ValueError("cannot aggregate zero records")
    n = len(eval_records)
    return ReportRow(
        method=method,
        split=split,
        miou=sum(r.iou for r in eval_records) / n,
        acc25=sum(1 for r in eval_records if r.correct_at_25) / n,
        acc50=sum(1 for r in eval_records if r.correct_at_50) / n,
        n=n,
    )


def emit_report(report: EvalReport, format: str = "markdown") -> str:
    """Render a report: markdown or csv tables (3-decimal), or canonical JSON."""
    if format == "json":
        return json.dumps(report.to_canonical_dict(), sort_keys=True, indent=2) + "\n"
    header = ["Method", "Split", "mIoU", "Acc@0.25", "Acc@0.5", "N"]
    table = [
        [r.method, r.split, f"{r.miou:.3f}", f"{r.acc25:.3f}", f"{r.acc50:.3f}", str(r.n)]
        for r in report.rows
    ]
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(header)
        writer.writerows(table)
        return buf.getvalue()
    if format == "markdown":
        lines = [
            "| " + " | ".join(header) + " |",
            "|" + "|".join([" --- "] * len(header)) + "|",
        ]
        lines.extend("| " + " | ".join(row) + " |" for row in table)
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {format!r}")


def run_eval(
    records: Sequence[DatasetRecord],
    mode: str,
    backends: RoleBackends,
    config: PipelineConfig = PipelineConfig(),
    *,
    n: Optional[int] = None,
    seed: int = 42,
    image_root=".",
    method_name: str = "LLM-Optic",
    workers: int = 4,
    baseline_chat: Optional[ChatBackend] = None,
) -> EvalReport:
    """Score a sampled slice of the dataset and aggregate per split.

    Model failures never abort the run (they score 0); only setup trouble
    does: unknown mode, missing images, or a sample larger than the
    dataset. Results are collected per record id, so the report does not
    depend on completion order.
    """
    if mode not in MODES:
        raise EvalSetupError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "baseline-direct" and baseline_chat is None:
        raise EvalSetupError("baseline-direct mode needs a multimodal chat backend")
    if not records:
        raise EvalSetupError("dataset has no records")
    try:
        sampled = sample(records, n if n is not None else len(records), seed)
    except ValueError as exc:
        raise EvalSetupError(str(exc)) from exc

    root = Path(image_root)
    image_cache: dict[str, tuple] = {}

    def load_image(rel_path: str):
        if rel_path not in image_cache:
            full = root / rel_path
            try:
                data = full.read_bytes()
                image_cache[rel_path] = (RasterImage.decode(data), data)
            except (OSError, ValueError) as exc:
                raise EvalSetupError(f"cannot load image {full}: {exc}") from exc
        return image_cache[rel_path]

    # decode up front so setup trouble aborts before any model call
    for record in sampled:
        load_image(record.image_path)

    def run_one(record: DatasetRecord) -> EvalRecord:
        image, data = load_image(record.image_path)
        request = GroundingRequest(image=image, image_bytes=data, query=record.query, config=config)
        if mode == "pipeline":
            outcome = ground(request, backends)
        elif mode == "baseline-direct":
            outcome = ground_baseline_direct(request, baseline_chat)
        else:
            outcome = ground_detector_only(request, backends)
        return score_record(record, outcome)

    if workers <= 1:
        scored = {record.record_id: run_one(record) for record in sampled}
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(run_one, sampled)
            scored = {r.record_id: r for r in results}
    ordered = [scored[record.record_id] for record in sampled]

    split_order = list(dict.fromkeys(record.split for record in sampled))
    by_split = {s: [] for s in split_order}
    for record, eval_record in zip(sampled, ordered):
        by_split[record.split].append(eval_record)
    rows = tuple(
        aggregate(by_split[s], method=method_name, split=s) for s in split_order
    )

    histogram: dict[str, int] = {}
    for eval_record in ordered:
        if eval_record.failure_stage is not None:
            histogram[eval_record.failure_stage] = histogram.get(eval_record.failure_stage, 0) + 1

    return EvalReport(
        rows=rows,
        config=asdict(config),
        seed=seed,
        failure_histogram=histogram,
    )
