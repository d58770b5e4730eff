"""Command-line surface: single-query grounding, batch eval, mark rendering.

Exit codes: 0 success (a no-target verdict is a correct answer, not a
failure), 2 grounding failed, 64 usage/configuration errors, 65 data
errors (datasets, box JSON, mock scripts), 74 I/O errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backends import (
    BackendError,
    DetectorClient,
    OpenAIChatClient,
    RoleBackends,
    ScriptedChatBackend,
    load_mock_script,
)
from .config import ConfigError, resolve_config
from .evaluation import DatasetError, EvalSetupError, emit_report, load_dataset, run_eval
from .geometry import InvalidBoxError, from_xywh
from .marking import RasterImage, assign_marks, render_boxes, render_marked
from .pipeline import (
    GroundingRequest,
    ground,
    ground_baseline_direct,
    ground_detector_only,
)

EXIT_OK = 0
EXIT_FAILED = 2
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_IO = 74


class CliParser(argparse.ArgumentParser):
    """argparse parser whose usage errors follow the exit-code contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> CliParser:
    parser = CliParser(prog="optic", description="Training-free visual grounding pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    def add_common(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--mock-script", help="JSON file of scripted per-role replies (offline mode)")
        p.add_argument("--show-config", action="store_true", help="print the resolved config and exit")
        p.add_argument("--chat-url", help="chat endpoint base URL")
        p.add_argument("--chat-key", help="chat endpoint API key")
        p.add_argument("--chat-model", help="chat model name for both language roles")
        p.add_argument("--detector-url", help="detector endpoint base URL")
        p.add_argument("--temperature", type=float, help="sampling temperature (default 0.75)")
        p.add_argument("--seed", type=int, help="random seed (default 42)")
        p.add_argument("--retry", type=int, dest="retry_count", help="retries per backend call (default 0)")
        p.add_argument("--box-threshold", type=float, help="detector box threshold (default 0.35)")
        p.add_argument("--text-threshold", type=float, help="detector text threshold (default 0.25)")
        p.add_argument("--ambiguity-suffix", action="store_true", default=None,
                       help="append the keep-original-description hint to the refinement prompt")
        p.add_argument("--mark-scale", type=int, help="badge scale factor (default 2)")
        p.add_argument("--no-outlines", action="store_true", default=None, help="badges only, no box outlines")
        p.add_argument("--force-visual-stage", action="store_true", default=None,
                       help="consult the selector even when the detector finds nothing")
        p.add_argument("--max-image-side", type=int, help="downscale images sent to the selector")
        p.add_argument("--prompt-text-grounder", help="override the refinement prompt file")
        p.add_argument("--prompt-visual-grounder", help="override the selection prompt file")
        p.add_argument("--prompt-gpt4v-baseline", help="override the direct-box prompt file")

    p_ground = sub.add_parser("ground", help="ground one query against one image")
    p_ground.add_argument("image", help="input image (PNG or JPEG)")
    p_ground.add_argument("query", help="natural-language query")
    p_ground.add_argument("--method", choices=["pipeline", "baseline-direct"], default="pipeline")
    p_ground.add_argument("--out", help="write the outcome JSON here instead of stdout")
    p_ground.add_argument("--save-marked", help="write the marked PNG here")
    p_ground.add_argument("--save-result", help="write the selected-boxes PNG here")
    add_common(p_ground)

    p_eval = sub.add_parser("eval", help="run the metric suite over a dataset")
    p_eval.add_argument("dataset", help="JSONL dataset file")
    p_eval.add_argument("--method", choices=["pipeline", "baseline-direct", "detector-only"],
                        default="pipeline")
    p_eval.add_argument("--n", type=int, default=200, help="sample size (default 200)")
    p_eval.add_argument("--report-format", choices=["markdown", "csv", "json"], default="markdown")
    p_eval.add_argument("--image-root", help="base directory for image paths (default: dataset directory)")
    p_eval.add_argument("--out", help="write the report here instead of stdout")
    p_eval.add_argument("--method-name", default="LLM-Optic", help="method label in report rows")
    p_eval.add_argument("--workers", type=int, help="parallel records (default 4; forced 1 under mocks)")
    add_common(p_eval)

    p_render = sub.add_parser("render", help="draw boxes and marks on an image")
    p_render.add_argument("image", help="input image (PNG or JPEG)")
    p_render.add_argument("--boxes", required=True,
                          help="JSON list of [x, y, w, h] boxes, or @file to read it")
    p_render.add_argument("--out-marked", help="write the boxes+marks PNG here")
    p_render.add_argument("--out-boxes", help="write the boxes-only PNG here")
    add_common(p_render)

    return parser


def _flag_overrides(args) -> dict:
    marks = {}
    if args.mark_scale is not None:
        marks["scale"] = args.mark_scale
    if args.no_outlines:
        marks["outlines"] = False
    prompts = {}
    if args.prompt_text_grounder:
        prompts["text_grounder"] = args.prompt_text_grounder
    if args.prompt_visual_grounder:
        prompts["visual_grounder"] = args.prompt_visual_grounder
    if args.prompt_gpt4v_baseline:
        prompts["gpt4v_baseline"] = args.prompt_gpt4v_baseline
    return {
        "chat": {
            "base_url": args.chat_url,
            "api_key": args.chat_key,
            "model": args.chat_model,
        },
        "detector": {
            "url": args.detector_url,
            "box_threshold": args.box_threshold,
            "text_threshold": args.text_threshold,
        },
        "pipeline": {
            "temperature": args.temperature,
            "seed": args.seed,
            "retry_count": args.retry_count,
            "ambiguity_suffix": args.ambiguity_suffix,
            "force_visual_stage": args.force_visual_stage,
            "max_image_side": args.max_image_side,
        },
        "marks": marks,
        "prompts": prompts,
    }


class UsageError(Exception):
    pass


def _build_backends(args, resolved) -> tuple[RoleBackends, object]:
    """Role backends plus the baseline chat backend (scripted or live)."""
    if args.mock_script:
        try:
            mocks = load_mock_script(args.mock_script)
        except FileNotFoundError as exc:
            raise IOError(f"mock script not found: {exc}") from exc
        except (json.JSONDecodeError, ValueError, BackendError) as exc:
            raise DatasetError(args.mock_script, [str(exc)]) from exc

        def missing(role):
            return ScriptedChatBackend([BackendError("network", f"role {role} not scripted")])

        backends = RoleBackends(
            text_grounder=mocks.get("text_grounder", missing("text_grounder")),
            detector=mocks.get("detector") or _missing_detector(),
            visual_grounder=mocks.get("visual_grounder", missing("visual_grounder")),
        )
        baseline = mocks.get("gpt4v_baseline", missing("gpt4v_baseline"))
        return backends, baseline

    chat_cfg = resolved.chat_endpoint()
    detector_cfg = resolved.detector_endpoint()
    if not chat_cfg.base_url or not detector_cfg.base_url:
        raise UsageError(
            "chat and detector endpoints must be configured "
            "(flags, OPTIC_* env vars, or config file) unless --mock-script is given"
        )
    text_client = OpenAIChatClient(resolved.chat_endpoint("text_model"))
    visual_client = OpenAIChatClient(resolved.chat_endpoint("visual_model"))
    detector_client = DetectorClient(detector_cfg)
    return RoleBackends(text_client, detector_client, visual_client), visual_client


def _missing_detector():
    from .backends import ScriptedDetectorBackend

    return ScriptedDetectorBackend([BackendError("network", "role detector not scripted")])


def cmd_ground(args) -> int:
    resolved = resolve_config(args.config, _flag_overrides(args))
    if args.show_config:
        sys.stdout.write(resolved.to_json())
        return EXIT_OK
    config = resolved.pipeline_config()
    try:
        request = GroundingRequest.from_file(args.image, args.query, config)
    except OSError as exc:
        print(f"optic ground: cannot read image: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"optic ground: {exc}", file=sys.stderr)
        return EXIT_DATA

    backends, baseline = _build_backends(args, resolved)
    if args.method == "baseline-direct":
        outcome = ground_baseline_direct(request, baseline)
    else:
        outcome = ground(request, backends)

    payload = json.dumps(outcome.to_dict(), sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)

    if args.save_marked:
        sheet = outcome.trace.mark_sheet
        if outcome.trace.marked_png is not None:
            Path(args.save_marked).write_bytes(outcome.trace.marked_png)
        elif sheet is not None:
            render_marked(request.image, sheet, config.mark_style).save_png(args.save_marked)
        else:
            print("optic ground: no mark sheet to save (run failed early)", file=sys.stderr)
    if args.save_result and outcome.kind == "found":
        boxes = [c.box for c in outcome.selected]
        render_boxes(request.image, boxes, config.mark_style).save_png(args.save_result)

    return EXIT_OK if outcome.kind in ("found", "no_target") else EXIT_FAILED


def cmd_eval(args) -> int:
    resolved = resolve_config(args.config, _flag_overrides(args))
    if args.show_config:
        sys.stdout.write(resolved.to_json())
        return EXIT_OK
    config = resolved.pipeline_config()
    try:
        records = load_dataset(args.dataset)
    except OSError as exc:
        print(f"optic eval: cannot read dataset: {exc}", file=sys.stderr)
        return EXIT_IO

    image_root = args.image_root or Path(args.dataset).parent
    backends, baseline = _build_backends(args, resolved)
    # shared scripted mocks are consumed in call order, so parallel workers
    # would destroy reproducibility
    workers = 1 if args.mock_script else (args.workers or 4)

    report = run_eval(
        records,
        args.method,
        backends,
        config,
        n=args.n,
        seed=config.seed,
        image_root=image_root,
        method_name=args.method_name,
        workers=workers,
        baseline_chat=baseline,
    )
    text = emit_report(report, args.report_format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_render(args) -> int:
    resolved = resolve_config(args.config, _flag_overrides(args))
    if args.show_config:
        sys.stdout.write(resolved.to_json())
        return EXIT_OK
    if not args.out_marked and not args.out_boxes:
        print("optic render: nothing to do; pass --out-marked and/or --out-boxes", file=sys.stderr)
        return EXIT_USAGE
    try:
        image = RasterImage.load(args.image)
    except OSError as exc:
        print(f"optic render: cannot read image: {exc}", file=sys.stderr)
        return EXIT_IO

    boxes_text = args.boxes
    if boxes_text.startswith("@"):
        try:
            boxes_text = Path(boxes_text[1:]).read_text(encoding="utf-8")
        except OSError as exc:
            print(f"optic render: cannot read boxes file: {exc}", file=sys.stderr)
            return EXIT_IO
    try:
        raw = json.loads(boxes_text)
        if not isinstance(raw, list):
            raise ValueError("boxes JSON must be a list")
        detections = []
        for i, entry in enumerate(raw):
            if isinstance(entry, dict):
                xywh = entry["xywh"]
                score = float(entry.get("score", 1.0))
                phrase = str(entry.get("phrase", ""))
            else:
                xywh, score, phrase = entry, 1.0, ""
            box = from_xywh(*map(float, xywh))
            if (box.x_min < 0 or box.y_min < 0
                    or box.x_max > image.width or box.y_max > image.height):
                raise ValueError(f"box {i} extends outside the {image.width}x{image.height} image")
            detections.append((box, score, phrase))
    except (ValueError, TypeError, KeyError, InvalidBoxError) as exc:
        print(f"optic render: bad boxes: {exc}", file=sys.stderr)
        return EXIT_DATA

    style = resolved.pipeline_config().mark_style
    if args.out_boxes:
        render_boxes(image, [d[0] for d in detections], style).save_png(args.out_boxes)
    if args.out_marked:
        sheet = assign_marks(detections, image.dims)
        render_marked(image, sheet, style).save_png(args.out_marked)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        if args.command == "ground":
            return cmd_ground(args)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_render(args)
    except ConfigError as exc:
        print(f"optic: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"optic: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, EvalSetupError) as exc:
        print(f"optic: {exc}", file=sys.stderr)
        return EXIT_DATA
    except IOError as exc:
        print(f"optic: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
