"""Client-side conformance against the shared detector wire schemas."""

import json
from importlib import resources

import jsonschema
import pytest

from optic.backends import BackendError, DetectionRequest, parse_detection_payload
from conftest import TWO_CHAIRS, detector_payload


def load_schema(name: str) -> dict:
    text = resources.files("optic").joinpath(f"schemas/{name}").read_text("utf-8")
    return json.loads(text)


RESPONSE_SCHEMA = load_schema("detection_response.schema.json")
REQUEST_SCHEMA = load_schema("detection_request.schema.json")


class TestResponseSchema:
    def test_fixture_payloads_validate(self):
        for payload in (TWO_CHAIRS, detector_payload([]), detector_payload([(0.5, 0.5, 1.0, 1.0, 0.0, "")])):
            jsonschema.validate(payload, RESPONSE_SCHEMA)
            parse_detection_payload(payload)  # client parsing agrees

    def test_schema_and_parser_reject_the_same_bodies(self):
        bad_bodies = [
            {"image_width": 10, "detections": []},  # missing height
            {"image_width": 10, "image_height": 10, "detections": [{"bbox": [0.1, 0.1, 0.1], "score": 0.5, "phrase": "x"}]},
            {"image_width": 10, "image_height": 10, "detections": [{"bbox": [0.1, 0.1, 0.1, 1.4], "score": 0.5, "phrase": "x"}]},
            {"image_width": 10, "image_height": 10, "detections": [{"bbox": [0.1, 0.1, 0.1, 0.1], "score": 1.5, "phrase": "x"}]},
            {"image_width": 0, "image_height": 10, "detections": []},
        ]
        for body in bad_bodies:
            with pytest.raises(jsonschema.ValidationError):
                jsonschema.validate(body, RESPONSE_SCHEMA)
            with pytest.raises(BackendError):
                parse_detection_payload(body)

    def test_client_wire_body_matches_request_schema(self):
        request = DetectionRequest(image_b64="aGVsbG8=", phrases=("chair", "person"))
        body = {
            "image_b64": request.image_b64,
            "phrases": list(request.phrases),
            "box_threshold": request.box_threshold,
            "text_threshold": request.text_threshold,
        }
        jsonschema.validate(body, REQUEST_SCHEMA)

    def test_request_schema_rejects_empty_phrases(self):
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate({"image_b64": "x", "phrases": []}, REQUEST_SCHEMA)
