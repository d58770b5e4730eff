"""Shared fixtures: synthetic images and scripted backend builders."""

import numpy as np
import pytest

from optic.backends import RoleBackends, ScriptedChatBackend, ScriptedDetectorBackend
from optic.marking import RasterImage


def make_image(width=64, height=48) -> RasterImage:
    ys, xs = np.mgrid[0:height, 0:width]
    arr = np.stack([(xs * 5) % 256, (ys * 7) % 256, (xs * 3 + ys * 2) % 256], axis=-1)
    return RasterImage.from_array(arr.astype(np.uint8))


def detector_payload(detections, width=64, height=48) -> dict:
    """Wire-shaped detector reply from (cx, cy, w, h, score, phrase) tuples."""
    return {
        "image_width": width,
        "image_height": height,
        "detections": [
            {"bbox": list(d[:4]), "score": d[4], "phrase": d[5]} for d in detections
        ],
    }


# the frozen "two chairs" scene: the right chair scores higher so it takes
# id 1, leaving the left chair as id 2
TWO_CHAIRS = detector_payload(
    [
        (0.75, 0.5, 0.3, 0.6, 0.82, "chair"),
        (0.25, 0.5, 0.3, 0.6, 0.74, "chair"),
    ]
)


def make_backends(text_script, detector_script, visual_script, log=None) -> RoleBackends:
    return RoleBackends(
        text_grounder=ScriptedChatBackend(text_script, log=log),
        detector=ScriptedDetectorBackend(detector_script, log=log),
        visual_grounder=ScriptedChatBackend(visual_script, log=log),
    )


@pytest.fixture
def scene_image() -> RasterImage:
    return make_image()
