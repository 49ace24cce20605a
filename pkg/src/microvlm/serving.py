"""HTTP inference service: chat, live metrics, health.

Endpoints:

- POST /v1/chat: JSON ChatRequest; with ``Accept: text/event-stream`` the
  answer streams as one SSE event per token followed by a terminal ``done``
  event carrying the full ChatResponse.
- GET /v1/metrics: latest telemetry snapshot plus the run report.
- GET /healthz: body exactly "ok" when the model is loaded, else 503.

Sessions are stateless: the client sends its full transcript each turn and
``session_id`` is echoed back. The model bundle is shared read-only across
request threads; each generation owns a private KV cache, so identical
greedy requests return identical answers no matter the concurrency.
"""

from __future__ import annotations

import base64
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import tokenizer as tok
from .checkpoint import load_checkpoint
from .images import decode_ppm, normalize
from .model import DecodePolicy, ModelBundle, generate
from .telemetry import (
    BudgetEnvelope, GenerationCounters, NoneProvider, PowerProvider,
    TelemetrySampler,
)

MAX_BODY_BYTES = 64 * 1024 * 1024


class RequestError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


class InferenceService:
    """Model plus telemetry shared by all request handler threads."""

    def __init__(self, bundle: ModelBundle | None = None,
                 checkpoint_path: str | None = None,
                 provider: PowerProvider | None = None,
                 envelope: BudgetEnvelope | None = None,
                 sample_interval_s: float = 0.1):
        self._bundle = bundle
        self._checkpoint_path = checkpoint_path
        self._load_lock = threading.Lock()
        self.envelope = envelope or BudgetEnvelope()
        self.counters = GenerationCounters()
        self.sampler = TelemetrySampler(provider or NoneProvider(), self.counters,
                                        interval_s=sample_interval_s)
        self.sampler.sample_once()

    @property
    def bundle(self) -> ModelBundle | None:
        return self._bundle

    def ensure_loaded(self) -> ModelBundle:
        """Single-flight checkpoint load; concurrent callers share one load."""
        if self._bundle is None and self._checkpoint_path is not None:
            with self._load_lock:
                if self._bundle is None:
                    self._bundle = load_checkpoint(self._checkpoint_path)
        if self._bundle is None:
            raise RequestError(503, "MODEL_NOT_LOADED", "no model checkpoint is loaded")
        return self._bundle

    def is_loaded(self) -> bool:
        return self._bundle is not None


def _parse_decode(raw: dict | None) -> tuple[DecodePolicy, int]:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise RequestError(400, "BAD_REQUEST", "decode must be an object")
    mode = raw.get("mode", "greedy")
    if mode not in ("greedy", "sample"):
        raise RequestError(400, "BAD_REQUEST", f"decode.mode must be greedy|sample, got {mode!r}")
    max_new = raw.get("max_new", 64)
    if not isinstance(max_new, int) or max_new < 1:
        raise RequestError(400, "BAD_REQUEST", "decode.max_new must be a positive integer")
    policy = DecodePolicy(
        mode="greedy" if mode == "greedy" else "temperature",
        temperature=float(raw.get("temperature", 1.0)),
        seed=int(raw.get("seed", 0)))
    try:
        policy.validate()
    except ValueError as exc:
        raise RequestError(400, "BAD_REQUEST", str(exc)) from exc
    return policy, max_new


def _parse_chat_request(body: dict):
    if not isinstance(body, dict):
        raise RequestError(400, "BAD_REQUEST", "request body must be a JSON object")
    messages = body.get("messages")
    if not isinstance(messages, list) or not messages:
        raise RequestError(400, "BAD_REQUEST", "messages must be a non-empty list")
    turns = []
    for i, m in enumerate(messages):
        if not isinstance(m, dict) or "role" not in m or "text" not in m:
            raise RequestError(400, "BAD_REQUEST", f"message {i} needs role and text")
        if m["role"] not in ("user", "assistant"):
            raise RequestError(400, "BAD_REQUEST", f"message {i} has bad role {m['role']!r}")
        turns.append(tok.Turn(m["role"], str(m["text"])))
    if turns[-1].role != "user":
        raise RequestError(400, "BAD_REQUEST", "last message must be from the user")

    image = None
    if body.get("image") is not None:
        try:
            raw = base64.b64decode(body["image"], validate=True)
        except Exception as exc:
            raise RequestError(400, "IMAGE_DECODE", f"invalid base64 image: {exc}") from exc
        try:
            image = normalize(decode_ppm(raw))
        except ValueError as exc:
            raise RequestError(400, "IMAGE_DECODE", f"not a usable PPM image: {exc}") from exc
    policy, max_new = _parse_decode(body.get("decode"))
    return body.get("session_id"), turns, image, policy, max_new


class _Handler(BaseHTTPRequestHandler):
    server_version = "microvlm"

    @property
    def service(self) -> InferenceService:
        return self.server.service  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):  # quiet by default
        pass

    # -- plumbing ----------------------------------------------------------

    def _send_json(self, status: int, payload: dict) -> None:
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def _send_error_body(self, err: RequestError) -> None:
        self._send_json(err.status, {"error": {"code": err.code, "message": str(err)}})

    def _wants_stream(self) -> bool:
        return "text/event-stream" in self.headers.get("Accept", "")

    def _event(self, name: str, payload: dict) -> None:
        self.wfile.write(f"event: {name}\ndata: {json.dumps(payload)}\n\n".encode("utf-8"))
        self.wfile.flush()

    # -- endpoints ---------------------------------------------------------

    def do_GET(self):
        if self.path == "/healthz":
            if self.service.is_loaded():
                body = b"ok"
                self.send_response(200)
                self.send_header("Content-Type", "text/plain")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
            else:
                self._send_json(503, {"error": {"code": "MODEL_NOT_LOADED",
                                                "message": "model is not loaded"}})
            return
        if self.path == "/v1/metrics":
            snap = self.service.sampler.sample_once()
            report = self.service.sampler.report(self.service.envelope)
            self._send_json(200, {
                "snapshot": snap.to_dict(),
                "report": report.to_dict() if report else None,
            })
            return
        self._send_json(404, {"error": {"code": "NOT_FOUND", "message": self.path}})

    def do_POST(self):
        if self.path != "/v1/chat":
            self._send_json(404, {"error": {"code": "NOT_FOUND", "message": self.path}})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            if length <= 0 or length > MAX_BODY_BYTES:
                raise RequestError(400, "BAD_REQUEST", "missing or oversized body")
            try:
                body = json.loads(self.rfile.read(length).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise RequestError(400, "BAD_JSON", f"body is not valid JSON: {exc}") from exc
            session_id, turns, image, policy, max_new = _parse_chat_request(body)
            bundle = self.service.ensure_loaded()
            try:
                rendered = tok.render_conversation(turns, include_image=image is not None,
                                                   add_generation_prompt=True)
            except tok.ConversationFormatError as exc:
                raise RequestError(400, "BAD_REQUEST", str(exc)) from exc
            merged_len = len(rendered.ids) + (63 if image is not None else 0)
            if merged_len >= bundle.config.max_seq_len:
                raise RequestError(413, "PROMPT_OVERLENGTH",
                                   f"prompt needs {merged_len} positions, limit is "
                                   f"{bundle.config.max_seq_len - 1}")
        except RequestError as err:
            self._send_error_body(err)
            return

        counters = self.service.counters
        started = time.monotonic()
        if self._wants_stream():
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.end_headers()
            decoder = tok.IncrementalDecoder()

            def on_token(token_id: int) -> None:
                counters.on_token(token_id)
                self._event("token", {"id": token_id, "text": decoder.push(token_id)})

            result = generate(bundle, rendered, image=image, policy=policy,
                              max_new=max_new, on_token=on_token)
            tail = decoder.flush()
            if tail:
                self._event("token", {"id": None, "text": tail})
            self._event("done", self._chat_response(session_id, result, started))
        else:
            result = generate(bundle, rendered, image=image, policy=policy,
                              max_new=max_new, on_token=counters.on_token)
            self._send_json(200, self._chat_response(session_id, result, started))

    def _chat_response(self, session_id, result, started) -> dict:
        snap = self.service.sampler.sample_once()
        return {
            "session_id": session_id,
            "answer": result.text,
            "token_count": len(result.token_ids),
            "latency_ms": (time.monotonic() - started) * 1000.0,
            "telemetry": snap.to_dict(),
        }


def create_server(service: InferenceService, host: str = "127.0.0.1",
                  port: int = 8080) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), _Handler)
    server.daemon_threads = True
    server.service = service  # type: ignore[attr-defined]
    return server


def run_server(service: InferenceService, host: str, port: int,
               report_out: str | None = None, on_bound=None) -> dict | None:
    """Serve until SIGTERM/SIGINT; returns the final run report dict."""
    import signal

    server = create_server(service, host, port)
    service.ensure_loaded()
    service.sampler.start()
    if on_bound is not None:
        on_bound(server.server_address[1])

    def handle_signal(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, handle_signal)
    signal.signal(signal.SIGINT, handle_signal)
    try:
        server.serve_forever()
    finally:
        server.server_close()
        service.sampler.stop()
    report = service.sampler.report(service.envelope)
    payload = report.to_dict() if report else None
    if report_out and payload is not None:
        with open(report_out, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=1)
    return payload
