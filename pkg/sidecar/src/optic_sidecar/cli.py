"""Entry point: serve the sidecar in stub or live mode."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import uvicorn

from .app import SidecarConfig, create_app


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="optic-sidecar", description="Detector wire-contract sidecar.")
    parser.add_argument("--stub", action="store_true", help="serve canned fixture detections")
    parser.add_argument("--checkpoint", help="pretrained detector checkpoint path or hub id")
    parser.add_argument("--fixtures", help="stub fixture directory (default: packaged fixtures)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8765)
    parser.add_argument("--box-threshold", type=float, default=0.35)
    parser.add_argument("--text-threshold", type=float, default=0.25)
    parser.add_argument("--workers", type=int, default=1, help="concurrent inferences in live mode")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = SidecarConfig(
            stub=args.stub,
            checkpoint=args.checkpoint,
            fixtures_dir=Path(args.fixtures) if args.fixtures else None,
            box_threshold=args.box_threshold,
            text_threshold=args.text_threshold,
            workers=args.workers,
        )
    except ValueError as exc:
        print(f"optic-sidecar: {exc}", file=sys.stderr)
        return 64
    app = create_app(config)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    sys.exit(main())
