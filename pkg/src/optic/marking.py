"""Mark assignment and rendering: number candidate boxes and draw them.

Candidates get dense numeric identifiers 1..N so a downstream multimodal
selector can answer "which box" by number. Rendering outlines each box and
stamps a filled badge with the identifier's digits at the box center, using
an embedded 5x7 bitmap font so no font files are needed. Badges default
small so they do not obscure the objects they label.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import BoundingBox, ImageDims, center, clamp

# 5x7 digit glyphs, one string row per scanline, '1' = lit pixel.
DIGIT_FONT = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

GLYPH_W = 5
GLYPH_H = 7
GLYPH_SPACING = 1

# distinct high-contrast colors, cycled per candidate
PALETTE = (
    (230, 25, 75),
    (0, 92, 230),
    (60, 180, 75),
    (245, 130, 48),
    (145, 30, 180),
    (0, 128, 128),
    (220, 190, 30),
    (240, 50, 230),
)


@dataclass(frozen=True)
class Candidate:
    """One detector hit, identified by its assigned mark number."""

    mark_id: int
    box: BoundingBox
    score: float
    phrase: str

    def __post_init__(self):
        if self.mark_id < 1:
            raise ValueError(f"mark_id must be positive, got {self.mark_id}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class MarkSheet:
    """Registry of marked candidates for one image; ids are dense 1..N."""

    candidates: tuple[Candidate, ...]
    image_dims: ImageDims

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        ids = [c.mark_id for c in self.candidates]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"mark ids must be exactly 1..N in order, got {ids}")
        w, h = self.image_dims.width, self.image_dims.height
        for c in self.candidates:
            b = c.box
            if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
                raise ValueError(f"candidate {c.mark_id} box {b} exceeds {w}x{h}")

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class MarkStyle:
    """Rendering knobs for outlines and identifier badges."""

    scale: int = 2
    stroke_width: int = 2
    draw_outlines: bool = True
    badge_padding: int = 1
    palette: tuple[tuple[int, int, int], ...] = PALETTE
    text_color: tuple[int, int, int] = (255, 255, 255)


@dataclass(frozen=True)
class RasterImage:
    """8-bit RGB image, row-major pixel buffer."""

    width: int
    height: int
    pixels: bytes

    def __post_init__(self):
        expected = self.width * self.height * 3
        if len(self.pixels) != expected:
            raise ValueError(
                f"pixel buffer has {len(self.pixels)} bytes, expected {expected}"
            )

    @property
    def dims(self) -> ImageDims:
        return ImageDims(self.width, self.height)

    @classmethod
    def new(cls, width: int, height: int, color=(0, 0, 0)) -> "RasterImage":
        row = bytes(color) * width
        return cls(width, height, row * height)

    @classmethod
    def decode(cls, data: bytes) -> "RasterImage":
        """Decode PNG or JPEG bytes."""
        with Image.open(io.BytesIO(data)) as im:
            rgb = im.convert("RGB")
            return cls(rgb.width, rgb.height, rgb.tobytes())

    @classmethod
    def load(cls, path) -> "RasterImage":
        with open(path, "rb") as f:
            return cls.decode(f.read())

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, 3
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RasterImage":
        h, w, _ = arr.shape
        return cls(w, h, arr.astype(np.uint8).tobytes())

    def to_png(self) -> bytes:
        im = Image.frombytes("RGB", (self.width, self.height), self.pixels)
        buf = io.BytesIO()
        im.save(buf, format="PNG")
        return buf.getvalue()

    def save_png(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_png())


def assign_marks(detections, dims: ImageDims) -> MarkSheet:
    """Number detections 1..N: descending score, then ascending x_min.

    Detections are (box, score, phrase) triples, pooled across phrases so a
    multi-subject query shares one numbering. Boxes are clamped to the frame
    first. Further coordinates and the phrase break any remaining ties so the
    id assignment is a pure function of the detection set, not input order.
    An empty detection list yields an empty sheet.
    """
    clamped = [(clamp(box, dims), score, phrase) for box, score, phrase in detections]
    clamped.sort(
        key=lambda d: (-d[1], d[0].x_min, d[0].y_min, d[0].x_max, d[0].y_max, d[2])
    )
    candidates = tuple(
        Candidate(mark_id=i + 1, box=box, score=score, phrase=phrase)
        for i, (box, score, phrase) in enumerate(clamped)
    )
    return MarkSheet(candidates=candidates, image_dims=dims)


def lookup(sheet: MarkSheet, mark_id: int):
    """Candidate with the given id, or None for ids not on the sheet.

    Absent ids are a value, not an error: the selector model can hallucinate
    identifiers and the pipeline decides what to do with them.
    """
    if 1 <= mark_id <= len(sheet.candidates):
        return sheet.candidates[mark_id - 1]
    return None


def render_marked(image: RasterImage, sheet: MarkSheet, style: MarkStyle = MarkStyle()) -> RasterImage:
    """Return a copy of the image with outlines and identifier badges drawn.

    Candidates are drawn in id order, so overlapping badges resolve with the
    later id on top. Badges are clipped at the frame, never an error.
    """
    arr = image.to_array().copy()
    for idx, cand in enumerate(sheet.candidates):
        color = style.palette[idx % len(style.palette)]
        if style.draw_outlines:
            _draw_outline(arr, cand.box, color, style.stroke_width)
        _draw_badge(arr, cand, color, style)
    return RasterImage.from_array(arr)


def render_boxes(image: RasterImage, boxes, style: MarkStyle = MarkStyle()) -> RasterImage:
    """Copy of the image with outlines only, no identifier badges."""
    arr = image.to_array().copy()
    for idx, box in enumerate(boxes):
        color = style.palette[idx % len(style.palette)]
        _draw_outline(arr, box, color, style.stroke_width)
    return RasterImage.from_array(arr)


def _fill_rect(arr: np.ndarray, x0: int, y0: int, x1: int, y1: int, color) -> None:
    h, w, _ = arr.shape
    x0, x1 = max(0, x0), min(w, x1)
    y0, y1 = max(0, y0), min(h, y1)
    if x0 < x1 and y0 < y1:
        arr[y0:y1, x0:x1] = color


def _draw_outline(arr: np.ndarray, box: BoundingBox, color, stroke: int) -> None:
    x0, y0 = int(round(box.x_min)), int(round(box.y_min))
    x1, y1 = int(round(box.x_max)), int(round(box.y_max))
    _fill_rect(arr, x0, y0, x1, y0 + stroke, color)
    _fill_rect(arr, x0, y1 - stroke, x1, y1, color)
    _fill_rect(arr, x0, y0, x0 + stroke, y1, color)
    _fill_rect(arr, x1 - stroke, y0, x1, y1, color)


def badge_geometry(mark_id: int, style: MarkStyle) -> tuple[int, int]:
    """Pixel width and height of the badge for a given identifier."""
    digits = str(mark_id)
    text_w = len(digits) * GLYPH_W + (len(digits) - 1) * GLYPH_SPACING
    badge_w = (text_w + 2 * style.badge_padding) * style.scale
    badge_h = (GLYPH_H + 2 * style.badge_padding) * style.scale
    return badge_w, badge_h


def _draw_badge(arr: np.ndarray, cand: Candidate, color, style: MarkStyle) -> None:
    digits = str(cand.mark_id)
    badge_w, badge_h = badge_geometry(cand.mark_id, style)
    cx, cy = center(cand.box)
    left = int(round(cx - badge_w / 2))
    top = int(round(cy - badge_h / 2))
    _fill_rect(arr, left, top, left + badge_w, top + badge_h, color)

    s = style.scale
    pad = style.badge_padding * s
    for k, digit in enumerate(digits):
        glyph = DIGIT_FONT[digit]
        gx = left + pad + k * (GLYPH_W + GLYPH_SPACING) * s
        gy = top + pad
        for row, bits in enumerate(glyph):
            for col, bit in enumerate(bits):
                if bit == "1":
                    _fill_rect(
                        arr,
                        gx + col * s,
                        gy + row * s,
                        gx + (col + 1) * s,
                        gy + (row + 1) * s,
                        style.text_color,
                    )
