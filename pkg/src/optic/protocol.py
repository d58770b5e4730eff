"""Prompt templates and reply parsers for the three model roles.

Templates ship as fixture text files and are loaded byte-for-byte; parsers
turn free-form model replies into typed values. Parsing is total: every
reply yields a value or a ParseError, never a crash, because replies feed
an evaluation loop that must keep going. Parsers always receive the raw
reply text so failure analysis can audit the original bytes.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass
from importlib import resources

from .backends import ChatRequest, ImagePart, Message, TextPart
from .geometry import BoundingBox, ImageDims, InvalidBoxError, clamp, from_xywh

TEXT_GROUNDER = "text_grounder"
VISUAL_GROUNDER = "visual_grounder"
GPT4V_BASELINE = "gpt4v_baseline"
ROLES = (TEXT_GROUNDER, VISUAL_GROUNDER, GPT4V_BASELINE)
MULTIMODAL_ROLES = (VISUAL_GROUNDER, GPT4V_BASELINE)

NO_TARGET_SENTINEL = "There are no targets that fit the description"
AMBIGUITY_SUFFIX = "If there is no obvious object, keep the original description unchanged"

_INT_ARRAY_RE = re.compile(r"\[\s*\d+\s*(?:,\s*\d+\s*)*\]")
_BRACKET_GROUP_RE = re.compile(r"\[([^\[\]]*)\]")
_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


class ParseError(Exception):
    """A model reply that cannot be interpreted for its role."""


@dataclass(frozen=True)
class PromptTemplate:
    role: str
    body: str
    ambiguity_suffix_enabled: bool = False

    def text(self) -> str:
        if self.ambiguity_suffix_enabled and self.role == TEXT_GROUNDER:
            return f"{self.body} {AMBIGUITY_SUFFIX}"
        return self.body


@dataclass(frozen=True)
class RefinedQuery:
    """Subject phrases extracted from the raw query, in reply order."""

    subjects: tuple[str, ...]
    raw_reply: str

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if not self.subjects or any(not s or s != s.strip() for s in self.subjects):
            raise ValueError(f"subjects must be non-empty trimmed phrases: {self.subjects!r}")


@dataclass(frozen=True)
class SelectionReply:
    """Either a list of chosen mark ids or an explicit no-target verdict."""

    kind: str  # "ids" | "no_target"
    ids: tuple[int, ...]
    raw_reply: str

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        if self.kind not in ("ids", "no_target"):
            raise ValueError(f"bad selection kind {self.kind!r}")
        if self.kind == "ids":
            if not self.ids or len(set(self.ids)) != len(self.ids):
                raise ValueError(f"ids must be non-empty and duplicate-free: {self.ids}")
        elif self.ids:
            raise ValueError("no_target reply carries no ids")


@dataclass(frozen=True)
class BaselineBoxReply:
    box: BoundingBox
    raw_reply: str


def load_template(role: str, path=None, ambiguity_suffix_enabled: bool = False) -> PromptTemplate:
    """Load a role's prompt body from its fixture file.

    `path` overrides the packaged fixture for prompt-variant experiments.
    """
    if role not in ROLES:
        raise ValueError(f"unknown template role {role!r}")
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            body = f.read()
    else:
        body = (
            resources.files("optic").joinpath(f"prompts/{role}.txt").read_text("utf-8")
        )
    return PromptTemplate(role=role, body=body, ambiguity_suffix_enabled=ambiguity_suffix_enabled)


def extract_json_object(reply: str) -> str:
    """First balanced {...} substring, after stripping code-fence markers.

    Balance tracking is string-aware so braces inside JSON strings do not
    derail the scan.

    Raises:
        ParseError: when no balanced object exists.
    """
    text = re.sub(r"```[A-Za-z]*", "", reply)
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
            elif ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start : i + 1]
        start = text.find("{", start + 1)
    raise ParseError(f"no JSON object in reply: {reply[:120]!r}")


def _subject_value(reply: str):
    data = json.loads(extract_json_object(reply))
    if not isinstance(data, dict) or "Subject" not in data:
        raise ParseError(f"reply lacks a Subject key: {reply[:120]!r}")
    return data["Subject"]


def parse_subjects(reply: str) -> RefinedQuery:
    """Split the Subject string on '.' separators into subject phrases.

    '.' is the separator the refinement prompt dictates; a trailing '.' is
    tolerated. Empty pieces are dropped; zero surviving phrases fail.
    """
    try:
        value = _subject_value(reply)
    except json.JSONDecodeError as exc:
        raise ParseError(f"reply is not valid JSON: {exc}") from exc
    if not isinstance(value, str):
        raise ParseError(f"Subject value is not a string: {value!r}")
    subjects = tuple(piece.strip() for piece in value.split(".") if piece.strip())
    if not subjects:
        raise ParseError(f"no subject phrases in {value!r}")
    return RefinedQuery(subjects=subjects, raw_reply=reply)


def _ids_from_text(text: str):
    match = _INT_ARRAY_RE.search(text)
    if match is None:
        return None
    ids = [int(n) for n in _NUMBER_RE.findall(match.group(0))]
    if not ids or any(i < 1 for i in ids):
        return None
    return tuple(dict.fromkeys(ids))


def parse_selection(reply: str) -> SelectionReply:
    """Interpret a candidate-selection reply: mark ids or the no-target sentinel.

    Recognizable id arrays always win over the sentinel; the sentinel is
    matched as a case-insensitive substring anywhere in the reply because
    models emit it as loose text rather than inside the JSON template.
    Duplicate ids collapse, order preserved.
    """
    ids = None
    try:
        value = _subject_value(reply)
    except (ParseError, json.JSONDecodeError):
        value = None
    if isinstance(value, list) and value and all(
        isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value
    ):
        ids = tuple(dict.fromkeys(value))
    elif isinstance(value, str):
        ids = _ids_from_text(value)
    if ids is None:
        ids = _ids_from_text(reply)
    if ids is not None:
        return SelectionReply(kind="ids", ids=ids, raw_reply=reply)
    if NO_TARGET_SENTINEL.lower() in reply.lower():
        return SelectionReply(kind="no_target", ids=(), raw_reply=reply)
    raise ParseError(f"neither mark ids nor no-target sentinel in {reply[:120]!r}")


def parse_baseline_box(reply: str, dims: ImageDims) -> BaselineBoxReply:
    """Extract an [x, y, w, h] box from a direct-grounding reply.

    Looks inside the Subject value first, then at the first bracket group
    in the reply; the box converts from corner+extent form and clamps to
    the image frame.
    """
    texts = []
    try:
        value = _subject_value(reply)
        if isinstance(value, str):
            texts.append(value)
        elif isinstance(value, list):
            texts.append(json.dumps(value))
    except (ParseError, json.JSONDecodeError):
        pass
    texts.append(reply)

    numbers = None
    for text in texts:
        match = _BRACKET_GROUP_RE.search(text)
        if match is None:
            continue
        found = [float(n) for n in _NUMBER_RE.findall(match.group(1))]
        if found:
            numbers = found
            break
    if numbers is None:
        raise ParseError(f"no bracketed box in {reply[:120]!r}")
    if len(numbers) != 4:
        raise ParseError(f"expected 4 box numbers, got {len(numbers)}: {numbers}")
    x, y, w, h = numbers
    try:
        box = clamp(from_xywh(x, y, w, h), dims)
    except InvalidBoxError as exc:
        raise ParseError(str(exc)) from exc
    return BaselineBoxReply(box=box, raw_reply=reply)


def build_messages(
    role: str,
    template: PromptTemplate,
    query: str,
    image_png: bytes | None = None,
    *,
    image_media_type: str = "image/png",
    model_name: str = "",
    temperature: float = 0.75,
    prompt_placement: str = "system",
) -> ChatRequest:
    """Assemble the chat request for a role: prompt + query (+ image).

    The prompt rides as a system message by default; "user" placement
    concatenates it ahead of the query in the single user turn.

    Raises:
        ValueError: multimodal role without an image, or role mismatch.
    """
    if role != template.role:
        raise ValueError(f"template role {template.role!r} does not match {role!r}")
    if role in MULTIMODAL_ROLES and image_png is None:
        raise ValueError(f"role {role!r} requires an image attachment")
    if prompt_placement not in ("system", "user"):
        raise ValueError(f"bad prompt placement {prompt_placement!r}")

    prompt = template.text()
    user_parts: list = []
    if prompt_placement == "system":
        user_parts.append(TextPart(query))
    else:
        user_parts.append(TextPart(f"{prompt}\n\n{query}"))
    if image_png is not None:
        user_parts.append(ImagePart(image_media_type, base64.b64encode(image_png).decode("ascii")))

    messages = []
    if prompt_placement == "system":
        messages.append(Message(role="system", parts=(TextPart(prompt),)))
    messages.append(Message(role="user", parts=tuple(user_parts)))
    return ChatRequest(model_name=model_name, temperature=temperature, messages=tuple(messages))
