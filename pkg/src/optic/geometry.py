"""Bounding-box types, coordinate-convention conversions, and IoU arithmetic.

The canonical in-memory representation is a pixel-space corner pair
(x_min, y_min, x_max, y_max) held as floats. Detector output arrives in
normalized center form and annotation files use corner+width+height; both
are converted at module boundaries so the rest of the code only ever sees
one convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class InvalidBoxError(ValueError):
    """Raised when box coordinates violate the corner-pair invariants."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned rectangle in pixel coordinates, corners (min, max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not math.isfinite(v):
                raise InvalidBoxError(f"non-finite coordinate in {self!r}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise InvalidBoxError(
                f"corners out of order: ({self.x_min}, {self.y_min}, "
                f"{self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def area(self) -> float:
        return self.width * self.height

    def to_xywh(self) -> tuple[float, float, float, float]:
        """Corner + width/height form (top-left x, top-left y, w, h)."""
        return (self.x_min, self.y_min, self.width, self.height)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class ImageDims:
    """Width and height of an image in whole pixels."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be >= 1, got {self.width}x{self.height}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1].

    A union of zero area (both boxes degenerate) yields 0.0, even when the
    degenerate boxes coincide: defining 0/0 as 0 keeps the metric total and
    penalizes degenerate predictions.
    """
    ix_min = max(a.x_min, b.x_min)
    iy_min = max(a.y_min, b.y_min)
    ix_max = min(a.x_max, b.x_max)
    iy_max = min(a.y_max, b.y_max)

    inter = max(0.0, ix_max - ix_min) * max(0.0, iy_max - iy_min)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def from_xywh(x: float, y: float, w: float, h: float) -> BoundingBox:
    """Build a corner-pair box from top-left corner plus width and height.

    Raises:
        InvalidBoxError: if width or height is negative.
    """
    if w < 0 or h < 0:
        raise InvalidBoxError(f"negative extent: w={w}, h={h}")
    return BoundingBox(x, y, x + w, y + h)


def from_normalized_center(
    cx: float, cy: float, w: float, h: float, dims: ImageDims
) -> BoundingBox:
    """Denormalize a (center-x, center-y, width, height) box in [0, 1] units.

    The result is clamped to [0, W] x [0, H]; detectors may emit boxes whose
    extent pokes past the frame once denormalized.

    Raises:
        InvalidBoxError: if any input falls outside [0, 1].
    """
    for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not (0.0 <= v <= 1.0):
            raise InvalidBoxError(f"normalized component {name}={v} outside [0, 1]")
    box = BoundingBox(
        (cx - w / 2) * dims.width,
        (cy - h / 2) * dims.height,
        (cx + w / 2) * dims.width,
        (cy + h / 2) * dims.height,
    )
    return clamp(box, dims)


def clamp(box: BoundingBox, dims: ImageDims) -> BoundingBox:
    """Clip a box to the image frame [0, W] x [0, H]."""
    return BoundingBox(
        min(max(box.x_min, 0.0), float(dims.width)),
        min(max(box.y_min, 0.0), float(dims.height)),
        min(max(box.x_max, 0.0), float(dims.width)),
        min(max(box.y_max, 0.0), float(dims.height)),
    )


def center(b: BoundingBox) -> tuple[float, float]:
    """Midpoint of a box."""
    return ((b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2)
