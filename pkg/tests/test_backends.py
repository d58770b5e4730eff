"""Backend tests: wire encoding, error mapping, retries, and scripted mocks."""

import json

import httpx
import pytest

from optic.backends import (
    BackendError,
    ChatReply,
    ChatRequest,
    DetectionRequest,
    DetectorClient,
    EndpointConfig,
    ImagePart,
    Message,
    OpenAIChatClient,
    ScriptedChatBackend,
    ScriptedDetectorBackend,
    TextPart,
    encode_chat_body,
    image_to_b64,
    parse_detection_payload,
    scripted_mock,
)
from optic.geometry import ImageDims


def chat_request(text="hello", image_b64=None, model="test-model"):
    parts = [TextPart(text)]
    if image_b64 is not None:
        parts.append(ImagePart("image/png", image_b64))
    return ChatRequest(
        model_name=model,
        temperature=0.75,
        messages=(Message(role="user", parts=tuple(parts)),),
    )


def chat_client(handler, **config_kwargs) -> OpenAIChatClient:
    config = EndpointConfig(base_url="http://chat.test/v1", **config_kwargs)
    return OpenAIChatClient(config, transport=httpx.MockTransport(handler))


def detector_client(handler, **config_kwargs) -> DetectorClient:
    config = EndpointConfig(base_url="http://detector.test", **config_kwargs)
    return DetectorClient(config, transport=httpx.MockTransport(handler))


def ok_chat_payload(text):
    return {
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 3},
    }


class TestChatClient:
    def test_posts_wire_shape_and_extracts_reply(self):
        seen = {}

        def handler(request: httpx.Request) -> httpx.Response:
            seen["url"] = str(request.url)
            seen["auth"] = request.headers.get("authorization")
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json=ok_chat_payload('{"Subject": "Chair"}'))

        client = chat_client(handler, api_key="sk-test", seed=42)
        reply = client.chat(chat_request(image_b64=image_to_b64(b"png-bytes")))

        assert reply.text == '{"Subject": "Chair"}'
        assert reply.token_usage == (11, 3)
        assert seen["url"] == "http://chat.test/v1/chat/completions"
        assert seen["auth"] == "Bearer sk-test"
        body = seen["body"]
        assert body["model"] == "test-model"
        assert body["temperature"] == 0.75
        assert body["seed"] == 42
        content = body["messages"][0]["content"]
        assert content[0] == {"type": "text", "text": "hello"}
        assert content[1]["type"] == "image_url"
        assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")

    def test_rate_limit_maps_to_rate_limited(self):
        client = chat_client(lambda req: httpx.Response(429, json={}))
        with pytest.raises(BackendError) as exc_info:
            client.chat(chat_request())
        assert exc_info.value.kind == "rate_limited"

    def test_http_error_carries_status(self):
        client = chat_client(lambda req: httpx.Response(503, json={}))
        with pytest.raises(BackendError) as exc_info:
            client.chat(chat_request())
        assert exc_info.value.kind == "http_status"
        assert exc_info.value.status_code == 503

    def test_network_error(self):
        def handler(request):
            raise httpx.ConnectError("unreachable")

        with pytest.raises(BackendError) as exc_info:
            chat_client(handler).chat(chat_request())
        assert exc_info.value.kind == "network"

    def test_timeout_error(self):
        def handler(request):
            raise httpx.ReadTimeout("too slow")

        with pytest.raises(BackendError) as exc_info:
            chat_client(handler).chat(chat_request())
        assert exc_info.value.kind == "timeout"

    def test_malformed_reply(self):
        client = chat_client(lambda req: httpx.Response(200, json={"nope": True}))
        with pytest.raises(BackendError) as exc_info:
            client.chat(chat_request())
        assert exc_info.value.kind == "malformed_reply"

    def test_no_hidden_retries_by_default(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(500, json={})

        with pytest.raises(BackendError):
            chat_client(handler).chat(chat_request())
        assert len(calls) == 1

    def test_retry_count_honored(self):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) < 3:
                return httpx.Response(500, json={})
            return httpx.Response(200, json=ok_chat_payload("ok"))

        client = chat_client(handler, retry_count=2)
        assert client.chat(chat_request()).text == "ok"
        assert len(calls) == 3

    def test_seed_omitted_when_none(self):
        seen = {}

        def handler(request):
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json=ok_chat_payload("ok"))

        chat_client(handler, seed=None).chat(chat_request())
        assert "seed" not in seen["body"]


class TestDetectorClient:
    PAYLOAD = {
        "image_width": 640,
        "image_height": 480,
        "detections": [
            {"bbox": [0.3, 0.5, 0.2, 0.4], "score": 0.82, "phrase": "chair"},
            {"bbox": [0.7, 0.5, 0.2, 0.4], "score": 0.74, "phrase": "chair"},
        ],
    }

    def test_round_trip(self):
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json=self.PAYLOAD)

        request = DetectionRequest(image_b64=image_to_b64(b"img"), phrases=("chair",))
        response = detector_client(handler).detect(request)

        assert seen["url"] == "http://detector.test/detect"
        assert seen["body"]["phrases"] == ["chair"]
        assert seen["body"]["box_threshold"] == 0.35
        assert seen["body"]["text_threshold"] == 0.25
        assert response.image_dims == ImageDims(640, 480)
        assert [d.score for d in response.detections] == [0.82, 0.74]

    def test_empty_phrases_rejected_before_any_wire_call(self):
        with pytest.raises(ValueError):
            DetectionRequest(image_b64="aGk=", phrases=())

    def test_out_of_range_bbox_is_malformed(self):
        bad = {
            "image_width": 10,
            "image_height": 10,
            "detections": [{"bbox": [0.5, 0.5, 1.3, 0.2], "score": 0.5, "phrase": "x"}],
        }
        client = detector_client(lambda req: httpx.Response(200, json=bad))
        request = DetectionRequest(image_b64="aGk=", phrases=("x",))
        with pytest.raises(BackendError) as exc_info:
            client.detect(request)
        assert exc_info.value.kind == "malformed_reply"

    def test_parse_detection_payload_is_strict(self):
        with pytest.raises(BackendError):
            parse_detection_payload({"image_width": 10, "detections": []})
        with pytest.raises(BackendError):
            parse_detection_payload(
                {"image_width": 10, "image_height": 10, "detections": [{"bbox": [0.1]}]}
            )

    def test_threshold_range_validated(self):
        with pytest.raises(ValueError):
            DetectionRequest(image_b64="aGk=", phrases=("x",), box_threshold=1.5)


class TestScriptedMocks:
    def test_echo_script(self):
        mock = ScriptedChatBackend(['{"Subject": "Chair"}'])
        for _ in range(3):
            assert mock.chat(chat_request()).text == '{"Subject": "Chair"}'

    def test_error_script(self):
        mock = ScriptedChatBackend([BackendError("rate_limited", "quota")])
        for _ in range(2):
            with pytest.raises(BackendError) as exc_info:
                mock.chat(chat_request())
            assert exc_info.value.kind == "rate_limited"

    def test_repeat_last_rule(self):
        mock = ScriptedChatBackend(["A", "B"])
        texts = [mock.chat(chat_request()).text for _ in range(3)]
        assert texts == ["A", "B", "B"]

    def test_transcript_records_requests(self):
        mock = ScriptedChatBackend(["A"])
        req = chat_request("query one")
        mock.chat(req)
        assert mock.transcript == [req]

    def test_empty_script_rejected(self):
        with pytest.raises(ValueError):
            ScriptedChatBackend([])
        with pytest.raises(ValueError):
            ScriptedDetectorBackend([])

    def test_detector_mock_from_payload_dict(self):
        mock = ScriptedDetectorBackend([TestDetectorClient.PAYLOAD])
        response = mock.detect(DetectionRequest(image_b64="aGk=", phrases=("chair",)))
        assert len(response.detections) == 2

    def test_mock_determinism(self):
        script = ["A", "B", BackendError("timeout")]
        outcomes = []
        for _ in range(2):
            mock = ScriptedChatBackend(list(script))
            run = []
            for _ in range(4):
                try:
                    run.append(mock.chat(chat_request()).text)
                except BackendError as err:
                    run.append(f"err:{err.kind}")
            outcomes.append(run)
        assert outcomes[0] == outcomes[1] == ["A", "B", "err:timeout", "err:timeout"]

    def test_scripted_mock_factory(self):
        assert isinstance(scripted_mock("text_grounder", ["x"]), ScriptedChatBackend)
        assert isinstance(scripted_mock("detector", [TestDetectorClient.PAYLOAD]), ScriptedDetectorBackend)
        with pytest.raises(ValueError):
            scripted_mock("referee", ["x"])

    def test_shared_log_orders_calls(self):
        log = []
        chat_mock = ScriptedChatBackend(["A"], log=log)
        det_mock = ScriptedDetectorBackend([TestDetectorClient.PAYLOAD], log=log)
        chat_mock.chat(chat_request())
        det_mock.detect(DetectionRequest(image_b64="aGk=", phrases=("x",)))
        chat_mock.chat(chat_request())
        assert [kind for kind, _ in log] == ["chat", "detect", "chat"]


class TestRequestInvariants:
    def test_needs_user_message(self):
        with pytest.raises(ValueError):
            ChatRequest(
                model_name="m",
                temperature=0.5,
                messages=(Message(role="system", parts=(TextPart("s"),)),),
            )

    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError):
            chat_request().__class__(
                model_name="m", temperature=-0.1,
                messages=(Message(role="user", parts=(TextPart("x"),)),),
            )

    def test_encode_body_data_url(self):
        req = chat_request(image_b64="QUJD")
        body = encode_chat_body(req, seed=None)
        url = body["messages"][0]["content"][1]["image_url"]["url"]
        assert url == "data:image/png;base64,QUJD"
