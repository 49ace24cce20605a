"""Start the HTTP service in-process and talk to all three endpoints.

Run: python3 demos/07_serve_and_chat.py
"""

import base64
import json
import threading
import urllib.request

from microvlm.datagen import ToyWorld, render_world
from microvlm.images import encode_ppm
from microvlm.model import ModelConfig, init_model
from microvlm.serving import InferenceService, create_server
from microvlm.telemetry import SimProvider

service = InferenceService(bundle=init_model(ModelConfig(seed=0)),
                           provider=SimProvider(18.9, 62.0))
server = create_server(service, port=0)
port = server.server_address[1]
threading.Thread(target=server.serve_forever, daemon=True).start()
base = f"http://127.0.0.1:{port}"
print(f"service on {base}")


def get(path, headers=None, payload=None):
    req = urllib.request.Request(base + path, method="POST" if payload else "GET",
                                 data=json.dumps(payload).encode() if payload else None)
    for k, v in (headers or {}).items():
        req.add_header(k, v)
    with urllib.request.urlopen(req, timeout=30) as resp:
        return resp.read()


print("\nGET /healthz ->", get("/healthz").decode())

image_b64 = base64.b64encode(
    encode_ppm(render_world(ToyWorld("ct", "mass", "lower"), seed=2))).decode()
request = {
    "session_id": "demo",
    "messages": [{"role": "user", "text": "Is there a mass?"}],
    "image": image_b64,
    "decode": {"mode": "greedy", "max_new": 8},
}

print("\nPOST /v1/chat (non-streaming):")
answer = json.loads(get("/v1/chat", payload=request))
print("  answer:", repr(answer["answer"]))
print("  tokens:", answer["token_count"], " latency: %.1f ms" % answer["latency_ms"])

print("\nPOST /v1/chat with Accept: text/event-stream:")
raw = get("/v1/chat", headers={"Accept": "text/event-stream"}, payload=request).decode()
for block in raw.strip().split("\n\n"):
    kind = block.splitlines()[0].removeprefix("event: ")
    data = json.loads(block.splitlines()[1].removeprefix("data: "))
    if kind == "token":
        print(f"  token event: {data}")
    else:
        print(f"  done event: answer={data['answer']!r}")

print("\nGET /v1/metrics:")
metrics = json.loads(get("/v1/metrics"))
print("  snapshot:", {k: metrics["snapshot"][k] for k in
                      ("tokens_generated", "power_w", "utilization_pct")})
print("  verdicts:", metrics["report"]["verdicts"])

server.shutdown()
print("\n(untrained weights: the answers are noise; see demo 05 for training)")
