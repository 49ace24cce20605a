"""HTTP service contract: endpoints, error codes, streaming, concurrency."""

import base64
import json
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor

import pytest

from microvlm.datagen import ToyWorld, render_world
from microvlm.images import encode_ppm
from microvlm.model import init_model
from microvlm.serving import InferenceService, create_server
from microvlm.telemetry import SimProvider

from test_model import tiny_config


def _request(base, path, payload=None, headers=None, method=None):
    data = json.dumps(payload).encode() if payload is not None else None
    req = urllib.request.Request(base + path, data=data, method=method)
    req.add_header("Content-Type", "application/json")
    for k, v in (headers or {}).items():
        req.add_header(k, v)
    try:
        with urllib.request.urlopen(req, timeout=30) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()


def _chat_payload(text="hi", image_b64=None, max_new=4, history=()):
    messages = [{"role": r, "text": t} for r, t in history]
    messages.append({"role": "user", "text": text})
    payload = {"messages": messages, "decode": {"mode": "greedy", "max_new": max_new}}
    if image_b64:
        payload["image"] = image_b64
    return payload


def _ppm_b64(side_world=("xray", "mass", "left"), seed=0):
    pixels = render_world(ToyWorld(*side_world), seed)
    return base64.b64encode(encode_ppm(pixels)).decode()


@pytest.fixture(scope="module")
def service():
    return InferenceService(bundle=init_model(tiny_config(seed=2)),
                            provider=SimProvider(18.9, 62.0))


@pytest.fixture(scope="module")
def base(service):
    server = create_server(service, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


def test_healthz_ok_body_exact(base):
    status, body = _request(base, "/healthz")
    assert status == 200
    assert body == b"ok"


def test_healthz_503_when_not_loaded():
    service = InferenceService(bundle=None)
    server = create_server(service, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_address[1]}"
        status, body = _request(url, "/healthz")
        assert status == 503
        status, body = _request(url, "/v1/chat", _chat_payload())
        assert status == 503
        assert json.loads(body)["error"]["code"] == "MODEL_NOT_LOADED"
    finally:
        server.shutdown()
        server.server_close()


def test_text_only_greedy_repeatable(base):
    r1 = _request(base, "/v1/chat", _chat_payload("hello there"))
    r2 = _request(base, "/v1/chat", _chat_payload("hello there"))
    assert r1[0] == r2[0] == 200
    a1, a2 = json.loads(r1[1]), json.loads(r2[1])
    assert a1["answer"] == a2["answer"]
    assert a1["token_count"] == a2["token_count"] >= 1


def test_chat_with_image_and_session_echo(base):
    payload = _chat_payload("what is this", image_b64=_ppm_b64())
    payload["session_id"] = "sess-1"
    status, body = _request(base, "/v1/chat", payload)
    assert status == 200
    out = json.loads(body)
    assert out["session_id"] == "sess-1"
    assert "telemetry" in out and out["telemetry"]["power_w"] == 18.9


def test_oversized_image_resampled_not_rejected(base):
    import numpy as np
    big = np.zeros((128, 96, 3), dtype=np.uint8)
    payload = _chat_payload("look", image_b64=base64.b64encode(encode_ppm(big)).decode())
    status, _ = _request(base, "/v1/chat", payload)
    assert status == 200


def test_invalid_base64_image(base):
    status, body = _request(base, "/v1/chat", _chat_payload("x", image_b64="!!!notb64!!!"))
    assert status == 400
    assert json.loads(body)["error"]["code"] == "IMAGE_DECODE"


def test_non_ppm_image(base):
    blob = base64.b64encode(b"GIF89a not a ppm").decode()
    status, body = _request(base, "/v1/chat", _chat_payload("x", image_b64=blob))
    assert status == 400
    assert json.loads(body)["error"]["code"] == "IMAGE_DECODE"


def test_malformed_json_and_schema(base):
    req = urllib.request.Request(base + "/v1/chat", data=b"{nope", method="POST")
    req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            status, body = resp.status, resp.read()
    except urllib.error.HTTPError as err:
        status, body = err.code, err.read()
    assert status == 400
    assert json.loads(body)["error"]["code"] == "BAD_JSON"

    status, body = _request(base, "/v1/chat", {"messages": []})
    assert status == 400
    status, body = _request(base, "/v1/chat",
                            {"messages": [{"role": "assistant", "text": "hi"}]})
    assert status == 400
    assert json.loads(body)["error"]["code"] == "BAD_REQUEST"


def test_prompt_overlength_413(base):
    status, body = _request(base, "/v1/chat", _chat_payload("x" * 1000))
    assert status == 413
    assert json.loads(body)["error"]["code"] == "PROMPT_OVERLENGTH"


def test_metrics_endpoint(base, service):
    status, body = _request(base, "/v1/metrics")
    assert status == 200
    out = json.loads(body)
    assert out["snapshot"]["power_w"] == 18.9
    assert out["snapshot"]["utilization_pct"] == 62.0
    assert "rss_bytes" in out["snapshot"]
    _request(base, "/v1/chat", _chat_payload("count me"))
    status, body = _request(base, "/v1/metrics")
    assert json.loads(body)["snapshot"]["tokens_generated"] > 0
    assert json.loads(body)["report"]["verdicts"] == ["OK"]


def test_metrics_zero_rate_before_any_request():
    service = InferenceService(bundle=init_model(tiny_config(seed=3)))
    server = create_server(service, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_address[1]}"
        status, body = _request(url, "/v1/metrics")
        out = json.loads(body)
        assert out["snapshot"]["tokens_generated"] == 0
        assert out["snapshot"]["tokens_per_second"] == 0.0
        assert "power_w" not in out["snapshot"]
    finally:
        server.shutdown()
        server.server_close()


def _parse_sse(raw: bytes):
    events = []
    for block in raw.decode().split("\n\n"):
        if not block.strip():
            continue
        name, data = None, None
        for line in block.splitlines():
            if line.startswith("event: "):
                name = line[7:]
            elif line.startswith("data: "):
                data = json.loads(line[6:])
        events.append((name, data))
    return events


def test_streamed_concatenation_equals_answer(base):
    payload = _chat_payload("stream me", image_b64=_ppm_b64(seed=3), max_new=6)
    status, body = _request(base, "/v1/chat", payload)
    assert status == 200
    direct = json.loads(body)["answer"]

    status, raw = _request(base, "/v1/chat", payload,
                           headers={"Accept": "text/event-stream"})
    assert status == 200
    events = _parse_sse(raw)
    tokens = [d["text"] for name, d in events if name == "token"]
    done = [d for name, d in events if name == "done"]
    assert len(done) == 1
    assert "".join(tokens) == done[0]["answer"] == direct
    # one event per generated token, plus at most one flush event (id None)
    real = [d for name, d in events if name == "token" and d["id"] is not None]
    assert done[0]["token_count"] == len(real)


def test_concurrent_identical_requests_identical_answers(base):
    payload = _chat_payload("race", image_b64=_ppm_b64(seed=5), max_new=5)

    def hit(_):
        status, body = _request(base, "/v1/chat", payload)
        assert status == 200
        return json.loads(body)["answer"]

    with ThreadPoolExecutor(max_workers=6) as pool:
        answers = list(pool.map(hit, range(6)))
    assert len(set(answers)) == 1


def test_requests_never_mutate_parameters(base, service):
    before = {n: p.data.tobytes() for n, p in service.bundle.params.items()}
    _request(base, "/v1/chat", _chat_payload("mutate?", image_b64=_ppm_b64(seed=7)))
    after = {n: p.data.tobytes() for n, p in service.bundle.params.items()}
    assert before == after


def test_unknown_paths_404(base):
    status, _ = _request(base, "/nope")
    assert status == 404
    status, _ = _request(base, "/v1/other", {"x": 1})
    assert status == 404
