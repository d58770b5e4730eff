"""FastAPI application implementing the detector wire contract.

GET /health reports mode and readiness; POST /detect serves either stub
fixtures or live model output. Schema violations answer 400; a missing
model answers 503.
"""

from __future__ import annotations

import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Header, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .live import LiveDetector
from .stub import FixtureStore


@dataclass(frozen=True)
class SidecarConfig:
    stub: bool = True
    checkpoint: Optional[str] = None
    fixtures_dir: Optional[Path] = None
    box_threshold: float = 0.35
    text_threshold: float = 0.25
    workers: int = 1

    def __post_init__(self):
        if self.stub == (self.checkpoint is not None):
            raise ValueError("exactly one of stub mode or a checkpoint must be active")


class DetectBody(BaseModel):
    image_b64: str
    phrases: list[str] = Field(min_length=1)
    box_threshold: float = Field(default=0.35, ge=0.0, le=1.0)
    text_threshold: float = Field(default=0.25, ge=0.0, le=1.0)


def create_app(config: SidecarConfig) -> FastAPI:
    mode = "stub" if config.stub else "live"
    store = FixtureStore(config.fixtures_dir) if config.stub else None
    detector = None if config.stub else LiveDetector(config.checkpoint, config.workers)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if detector is not None:
            threading.Thread(target=detector.load, daemon=True).start()
        yield

    app = FastAPI(title="optic-sidecar", lifespan=lifespan)

    @app.exception_handler(RequestValidationError)
    async def validation_to_400(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.get("/health")
    def health():
        if mode == "stub":
            return {"status": "ok", "mode": "stub"}
        if detector.loaded:
            return {"status": "ok", "mode": "live"}
        detail = detector.load_error or "loading"
        return JSONResponse(status_code=503, content={"status": "unavailable", "mode": "live", "detail": detail})

    @app.post("/detect")
    def detect(body: DetectBody, x_stub_fixture: Optional[str] = Header(default=None)):
        if mode == "stub":
            fixture = store.lookup(x_stub_fixture, body.model_dump())
            if fixture is None:
                return JSONResponse(status_code=404, content={"detail": "no matching stub fixture"})
            return Response(content=fixture, media_type="application/json")
        if not detector.loaded:
            detail = detector.load_error or "model still loading"
            return JSONResponse(status_code=503, content={"detail": detail})
        payload = detector.detect(
            body.image_b64, body.phrases, body.box_threshold, body.text_threshold
        )
        return JSONResponse(content=payload)

    return app
