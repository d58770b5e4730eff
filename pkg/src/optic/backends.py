"""Model backends: role interfaces, HTTP clients, and scripted mocks.

The pipeline talks to three roles: a text model that refines queries, a
detector that proposes boxes, and a multimodal model that picks marked
candidates. Each role is a small protocol so live HTTP clients and offline
scripted mocks are interchangeable without touching pipeline code.

Transport errors are raised as BackendError values and never abort a run:
the evaluation policy scores a failed call as a miss and moves on.
"""

from __future__ import annotations

import base64
import json
import threading
import time
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Union

import httpx

from .geometry import ImageDims

ERROR_KINDS = ("network", "http_status", "rate_limited", "malformed_reply", "timeout")


class BackendError(Exception):
    """A failed backend call: transport, protocol, or reply-shape trouble."""

    def __init__(self, kind: str, detail: str = "", status_code: Optional[int] = None):
        if kind not in ERROR_KINDS:
            raise ValueError(f"unknown error kind {kind!r}")
        self.kind = kind
        self.detail = detail
        self.status_code = status_code
        super().__init__(f"{kind}: {detail}" if detail else kind)

    def clone(self) -> "BackendError":
        return BackendError(self.kind, self.detail, self.status_code)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    media_type: str
    data_b64: str


@dataclass(frozen=True)
class Message:
    role: str  # "system" | "user"
    parts: tuple[Union[TextPart, ImagePart], ...]

    def __post_init__(self):
        if self.role not in ("system", "user"):
            raise ValueError(f"unsupported message role {self.role!r}")
        object.__setattr__(self, "parts", tuple(self.parts))


@dataclass(frozen=True)
class ChatRequest:
    model_name: str
    temperature: float
    messages: tuple[Message, ...]

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("chat request needs at least one user message")


@dataclass(frozen=True)
class ChatReply:
    text: str
    latency_ms: float = 0.0
    token_usage: Optional[tuple[int, int]] = None  # (prompt, completion)


@dataclass(frozen=True)
class DetectionRequest:
    image_b64: str
    phrases: tuple[str, ...]
    box_threshold: float = 0.35
    text_threshold: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "phrases", tuple(self.phrases))
        if not self.phrases:
            raise ValueError("detection request needs at least one phrase")
        for name, v in (("box_threshold", self.box_threshold), ("text_threshold", self.text_threshold)):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class Detection:
    """One detector hit in normalized center form (cx, cy, w, h)."""

    bbox: tuple[float, float, float, float]
    score: float
    phrase: str

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(self.bbox))
        if len(self.bbox) != 4 or any(not (0.0 <= v <= 1.0) for v in self.bbox):
            raise ValueError(f"normalized bbox components must be in [0, 1]: {self.bbox}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class DetectionResponse:
    detections: tuple[Detection, ...]
    image_dims: ImageDims

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))


class ChatBackend(Protocol):
    def chat(self, request: ChatRequest) -> ChatReply: ...


class DetectorBackend(Protocol):
    def detect(self, request: DetectionRequest) -> DetectionResponse: ...


@dataclass
class RoleBackends:
    """The three roles a full grounding run needs."""

    text_grounder: ChatBackend
    detector: DetectorBackend
    visual_grounder: ChatBackend


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    api_key: str = ""
    model_name: str = ""
    timeout_s: float = 120.0
    retry_count: int = 0
    seed: Optional[int] = 42
    max_concurrency: int = 4


def parse_detection_payload(payload) -> DetectionResponse:
    """Validate a detector wire reply and build a DetectionResponse.

    Shared by the HTTP client and contract tests so both sides of the wire
    check the same invariants.

    Raises:
        BackendError: kind=malformed_reply on any schema or range violation.
    """
    try:
        dims = ImageDims(int(payload["image_width"]), int(payload["image_height"]))
        detections = tuple(
            Detection(
                bbox=tuple(float(v) for v in d["bbox"]),
                score=float(d["score"]),
                phrase=str(d["phrase"]),
            )
            for d in payload["detections"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendError("malformed_reply", f"bad detector reply: {exc}") from exc
    return DetectionResponse(detections=detections, image_dims=dims)


def encode_chat_body(request: ChatRequest, seed: Optional[int]) -> dict:
    """OpenAI-compatible request body for a chat completion."""
    messages = []
    for m in request.messages:
        content = []
        for part in m.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                url = f"data:{part.media_type};base64,{part.data_b64}"
                content.append({"type": "image_url", "image_url": {"url": url}})
        messages.append({"role": m.role, "content": content})
    body = {
        "model": request.model_name,
        "temperature": request.temperature,
        "messages": messages,
    }
    if seed is not None:
        body["seed"] = seed
    return body


class _HttpBase:
    def __init__(self, config: EndpointConfig, transport: Optional[httpx.BaseTransport] = None):
        self.config = config
        self._semaphore = threading.Semaphore(config.max_concurrency)
        self._client = httpx.Client(
            timeout=config.timeout_s,
            transport=transport,
        )

    def _post(self, url: str, body: dict, headers: dict) -> httpx.Response:
        """One POST per call; retries only up to the configured count."""
        attempts = self.config.retry_count + 1
        last_error: Optional[BackendError] = None
        for _ in range(attempts):
            try:
                with self._semaphore:
                    response = self._client.post(url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last_error = BackendError("timeout", str(exc))
                continue
            except httpx.HTTPError as exc:
                last_error = BackendError("network", str(exc))
                continue
            if response.status_code == 429:
                last_error = BackendError("rate_limited", "http 429", status_code=429)
                continue
            if response.status_code >= 400:
                last_error = BackendError(
                    "http_status",
                    f"http {response.status_code}",
                    status_code=response.status_code,
                )
                continue
            return response
        raise last_error

    def close(self) -> None:
        self._client.close()


class OpenAIChatClient(_HttpBase):
    """Chat-completions client for any OpenAI-compatible endpoint.

    One wire shape covers hosted GPT-family endpoints and locally served
    open models, which is what makes the roles swappable.
    """

    def chat(self, request: ChatRequest) -> ChatReply:
        if not request.model_name:
            request = ChatRequest(
                model_name=self.config.model_name,
                temperature=request.temperature,
                messages=request.messages,
            )
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        body = encode_chat_body(request, self.config.seed)

        started = time.perf_counter()
        response = self._post(url, body, headers)
        latency_ms = (time.perf_counter() - started) * 1000.0

        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"]
            if not isinstance(text, str):
                raise TypeError(f"content is {type(text).__name__}, not str")
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise BackendError("malformed_reply", f"bad chat reply: {exc}") from exc

        usage = data.get("usage")
        token_usage = None
        if isinstance(usage, dict):
            prompt = usage.get("prompt_tokens")
            completion = usage.get("completion_tokens")
            if isinstance(prompt, int) and isinstance(completion, int):
                token_usage = (prompt, completion)
        return ChatReply(text=text, latency_ms=latency_ms, token_usage=token_usage)


class DetectorClient(_HttpBase):
    """Client for the detector sidecar wire protocol."""

    def detect(self, request: DetectionRequest) -> DetectionResponse:
        url = self.config.base_url.rstrip("/") + "/detect"
        body = {
            "image_b64": request.image_b64,
            "phrases": list(request.phrases),
            "box_threshold": request.box_threshold,
            "text_threshold": request.text_threshold,
        }
        response = self._post(url, body, headers={})
        try:
            payload = response.json()
        except json.JSONDecodeError as exc:
            raise BackendError("malformed_reply", f"detector reply is not JSON: {exc}") from exc
        return parse_detection_payload(payload)


class ScriptedChatBackend:
    """Deterministic offline chat backend driven by a canned script.

    Each call consumes the next entry; once exhausted, the last entry
    repeats. Entries are reply strings or BackendError values to raise.
    Every request is appended to `transcript` (and to the optional shared
    `log` as ("chat", request)) for assertions.
    """

    def __init__(self, script: Sequence, log: Optional[list] = None):
        if not script:
            raise ValueError("script must be non-empty")
        self._script = list(script)
        self._index = 0
        self._lock = threading.Lock()
        self.transcript: list[ChatRequest] = []
        self._log = log

    def chat(self, request: ChatRequest) -> ChatReply:
        with self._lock:
            entry = self._script[min(self._index, len(self._script) - 1)]
            self._index += 1
            self.transcript.append(request)
            if self._log is not None:
                self._log.append(("chat", request))
        if isinstance(entry, BackendError):
            raise entry.clone()
        return ChatReply(text=str(entry))


class ScriptedDetectorBackend:
    """Deterministic offline detector; same script rules as the chat mock."""

    def __init__(self, script: Sequence, log: Optional[list] = None):
        if not script:
            raise ValueError("script must be non-empty")
        self._script = [
            parse_detection_payload(e) if isinstance(e, dict) else e for e in script
        ]
        self._index = 0
        self._lock = threading.Lock()
        self.transcript: list[DetectionRequest] = []
        self._log = log

    def detect(self, request: DetectionRequest) -> DetectionResponse:
        with self._lock:
            entry = self._script[min(self._index, len(self._script) - 1)]
            self._index += 1
            self.transcript.append(request)
            if self._log is not None:
                self._log.append(("detect", request))
        if isinstance(entry, BackendError):
            raise entry.clone()
        return entry


CHAT_ROLES = ("text_grounder", "visual_grounder", "gpt4v_baseline")


def scripted_mock(role: str, script: Sequence, log: Optional[list] = None):
    """Build the scripted mock matching a role name."""
    if role in CHAT_ROLES:
        return ScriptedChatBackend(script, log=log)
    if role == "detector":
        return ScriptedDetectorBackend(script, log=log)
    raise ValueError(f"unknown role {role!r}")


def _decode_script_entry(role: str, entry):
    if isinstance(entry, dict) and "error" in entry:
        return BackendError(
            entry["error"], entry.get("detail", ""), entry.get("status_code")
        )
    if role == "detector":
        if not isinstance(entry, dict):
            raise ValueError(f"detector script entry must be an object, got {entry!r}")
        return parse_detection_payload(entry)
    if isinstance(entry, str):
        return entry
    if isinstance(entry, dict) and "text" in entry:
        return entry["text"]
    raise ValueError(f"chat script entry must be a string, got {entry!r}")


def load_mock_script(path) -> dict:
    """Load a JSON file of per-role scripts into mock backend instances.

    The file maps role names (text_grounder, detector, visual_grounder,
    gpt4v_baseline) to entry lists. Chat entries are reply strings (or
    {"text": ...}); detector entries are wire-shaped response objects;
    {"error": kind, "detail": ...} injects a failure for any role.
    """
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    backends = {}
    for role, entries in raw.items():
        if role not in CHAT_ROLES and role != "detector":
            raise ValueError(f"unknown role {role!r} in mock script")
        script = [_decode_script_entry(role, e) for e in entries]
        backends[role] = scripted_mock(role, script)
    return backends


def image_to_b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")
