"""Live detector wrapper around a pretrained open-vocabulary checkpoint.

Imports torch/transformers lazily so stub mode has no heavy dependencies.
Inference is serialized through a semaphore sized by the worker count;
the output is converted to the wire contract's normalized center form.
"""

from __future__ import annotations

import base64
import io
import threading
from typing import Optional


class LiveDetector:
    def __init__(self, checkpoint: str, workers: int = 1):
        self.checkpoint = checkpoint
        self._semaphore = threading.Semaphore(max(1, workers))
        self._processor = None
        self._model = None
        self._error: Optional[str] = None

    @property
    def loaded(self) -> bool:
        return self._model is not None

    @property
    def load_error(self) -> Optional[str]:
        return self._error

    def load(self) -> None:
        try:
            from transformers import AutoModelForZeroShotObjectDetection, AutoProcessor

            self._processor = AutoProcessor.from_pretrained(self.checkpoint)
            self._model = AutoModelForZeroShotObjectDetection.from_pretrained(self.checkpoint)
            self._model.eval()
            self._error = None
        except Exception as exc:  # any load trouble means the service answers 503
            self._error = f"{type(exc).__name__}: {exc}"

    def detect(self, image_b64: str, phrases, box_threshold: float, text_threshold: float) -> dict:
        if not self.loaded:
            raise RuntimeError(self._error or "model not loaded")
        import torch
        from PIL import Image

        image = Image.open(io.BytesIO(base64.b64decode(image_b64))).convert("RGB")
        # phrase-grounded detectors expect a lowercase period-separated prompt
        text = " . ".join(p.lower().strip() for p in phrases) + " ."
        with self._semaphore:
            inputs = self._processor(images=image, text=text, return_tensors="pt")
            with torch.no_grad():
                outputs = self._model(**inputs)
            results = self._processor.post_process_grounded_object_detection(
                outputs,
                inputs.input_ids,
                box_threshold=box_threshold,
                text_threshold=text_threshold,
                target_sizes=[(image.height, image.width)],
            )[0]

        detections = []
        for box, score, label in zip(results["boxes"], results["scores"], results["labels"]):
            x0, y0, x1, y1 = (float(v) for v in box)
            cx = max(0.0, min(1.0, (x0 + x1) / 2 / image.width))
            cy = max(0.0, min(1.0, (y0 + y1) / 2 / image.height))
            w = max(0.0, min(1.0, (x1 - x0) / image.width))
            h = max(0.0, min(1.0, (y1 - y0) / image.height))
            detections.append(
                {
                    "bbox": [cx, cy, w, h],
                    "score": max(0.0, min(1.0, float(score))),
                    "phrase": str(label),
                }
            )
        return {
            "image_width": image.width,
            "image_height": image.height,
            "detections": detections,
        }
