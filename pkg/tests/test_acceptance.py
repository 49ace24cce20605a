"""Acceptance suite: one test per criterion, at the stated tolerances.

The pipeline fixture runs the full default three-stage chain once (the
expensive part); the convergence, freeze, and end-to-end criteria all read
from it. Every test prints a [PASS] line naming its criterion (visible with
pytest -s or -rA).
"""

import base64
import json
import threading
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from microvlm import tensor as T
from microvlm import tokenizer as tok
from microvlm.checkpoint import (
    CheckpointFormatError, CheckpointTruncatedError, checkpoint_bytes,
    load_checkpoint_bytes,
)
from microvlm.datagen import generate_caption_pairs, generate_corpus, write_caption_dataset
from microvlm.evaluation import echo_generator, evaluate_samples, evaluate_split
from microvlm.model import (
    KVCache, ModelConfig, encode_image, forward_lm, generate, init_model,
    merge_sequence, project_features,
)
from microvlm.serving import InferenceService, create_server
from microvlm.telemetry import (
    GIB, BudgetEnvelope, GenerationCounters, SimProvider, TelemetrySnapshot,
    check_budget, sample,
)
from microvlm.tensor import Tensor, backward, recording
from microvlm.training import StageConfig, run_stage

from gradcheck import max_relative_error, numerical_gradient
from test_evaluation import brute_closed, brute_open, random_pairs
from test_model import tiny_config
from test_serving import _chat_payload, _parse_sse, _ppm_b64, _request

RESULTS: dict[str, dict] = {}


def passed(criterion: str, **detail):
    RESULTS[criterion] = detail
    pretty = ", ".join(f"{k}={v}" for k, v in detail.items())
    print(f"\n[PASS] {criterion}: {pretty}")


# ---------------------------------------------------------------------------
# the one full-size pipeline run every training criterion reads from
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_corpus")
    generate_corpus(root, seed=0)  # default toy split sizes
    bundle = init_model(ModelConfig(seed=0))
    timings: dict[str, float] = {}
    logs = {}
    vision_before = None
    vision_after = None
    for stage, data in [("ALIGN", "align.jsonl"), ("INSTRUCT", "instruct.jsonl"),
                        ("FINETUNE", "vqa_train.jsonl")]:
        cfg = StageConfig(stage, str(root / data), seed=1,
                          checkpoint_out=str(root / f"{stage.lower()}.tlvm"))
        if stage == "INSTRUCT":
            vision_before = {n: bundle.params[n].data.tobytes()
                             for n in bundle.names_in_family("VISION")}
        t0 = time.monotonic()
        bundle, logs[stage] = run_stage(bundle, cfg)
        timings[stage] = time.monotonic() - t0
        if stage == "INSTRUCT":
            vision_after = {n: bundle.params[n].data.tobytes()
                            for n in bundle.names_in_family("VISION")}
    return dict(root=root, bundle=bundle, logs=logs, timings=timings,
                vision_before=vision_before, vision_after=vision_after)


# ---------------------------------------------------------------------------
# criterion: gradient suite
# ---------------------------------------------------------------------------

class TestGradientSuite:
    """Analytic vs central finite differences (h=1e-5), rel err < 1e-4,
    >=100 randomized cases per op plus a full model step, under 2 minutes."""

    TOL = 1e-4

    def test_gradient_suite(self):
        started = time.monotonic()
        worst: dict[str, float] = {}

        def check(name, build, n=100):
            rng = np.random.default_rng(hash(name) % 2 ** 32)
            w = 0.0
            for _ in range(n):
                forward, tensors = build(rng)
                with recording() as tape:
                    loss = forward()
                backward(loss, tape)
                numeric = numerical_gradient(lambda: forward().item(),
                                             [t.data for t in tensors])
                for t, g in zip(tensors, numeric):
                    w = max(w, max_relative_error(t.grad, g))
            worst[name] = w
            assert w < self.TOL, f"{name}: {w:.2e}"

        def t(rng, *shape, grad=True):
            return Tensor(rng.standard_normal(shape), requires_grad=grad)

        check("matmul", lambda rng: (
            (lambda a=t(rng, 3, 4), b=t(rng, 4, 2):
             (lambda: T.sum_all(T.mul(m := T.matmul(a, b), m)), [a, b]))()))
        check("add_bias", lambda rng: (
            (lambda a=t(rng, 4, 5), b=t(rng, 5):
             (lambda: T.sum_all(T.mul(s := T.add(a, b), s)), [a, b]))()))
        check("mul", lambda rng: (
            (lambda a=t(rng, 4, 4), b=t(rng, 4, 4):
             (lambda: T.sum_all(T.scale(T.mul(a, b), 1.3)), [a, b]))()))
        check("gelu", lambda rng: (
            (lambda x=t(rng, 3, 7):
             (lambda: T.sum_all(T.mul(g := T.gelu(x), g)), [x]))()))
        check("softmax", lambda rng: (
            (lambda x=t(rng, 3, 6), w=t(rng, 3, 6, grad=False):
             (lambda: T.sum_all(T.mul(T.softmax(x), w)), [x]))()))
        check("layer_norm", lambda rng: (
            (lambda x=t(rng, 4, 6), g=t(rng, 6), b=t(rng, 6), w=t(rng, 4, 6, grad=False):
             (lambda: T.sum_all(T.mul(T.layer_norm(x, g, b), w)), [x, g, b]))()))
        check("embedding", lambda rng: (
            (lambda table=t(rng, 6, 4), ids=rng.integers(0, 6, size=8),
                    w=t(rng, 8, 4, grad=False):
             (lambda: T.sum_all(T.mul(T.embedding(table, ids), w)), [table]))()))
        check("cross_entropy", lambda rng: (
            (lambda x=t(rng, 5, 7), targets=rng.integers(0, 7, size=5):
             (lambda: T.cross_entropy(x, targets), [x]))()))

        self._full_model_step()
        elapsed = time.monotonic() - started
        assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s"
        passed("gradient suite",
               worst_rel_err=f"{max(worst.values()):.2e}", seconds=round(elapsed, 1))

    def _full_model_step(self, n_coords=120):
        """Finite differences through the whole image+text stack."""
        cfg = tiny_config(d_model=16, n_layers=1, n_heads=2, d_ff=24,
                          d_vision=8, n_vision_layers=1, n_vision_heads=2,
                          d_vision_ff=16, connector_hidden=12, seed=9)
        bundle = init_model(cfg)
        rng = np.random.default_rng(1)
        image = rng.uniform(-1, 1, (64, 64, 3))
        prompt = tok.render_conversation(
            [tok.Turn("user", "q?"), tok.Turn("assistant", "yes")], include_image=True)

        def loss_value() -> float:
            visual = project_features(bundle, encode_image(bundle, image))
            merged = merge_sequence(bundle, prompt, visual)
            logits = forward_lm(bundle, merged.embedded)
            targets = np.concatenate([merged.ids[1:], [tok.PAD]])
            ignore = np.concatenate([~merged.loss_mask[1:], [True]])
            return T.cross_entropy(logits, targets, ignore)

        with recording() as tape:
            loss = loss_value()
        backward(loss, tape)

        names = sorted(bundle.params)
        worst = 0.0
        h = 1e-5
        for _ in range(n_coords):
            name = names[rng.integers(len(names))]
            p = bundle.params[name]
            idx = np.unravel_index(int(rng.integers(p.size)), p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = loss_value().item()
            p.data[idx] = orig - h
            down = loss_value().item()
            p.data[idx] = orig
            fd = (up - down) / (2 * h)
            analytic = p.grad[idx] if p.grad is not None else 0.0
            worst = max(worst, max_relative_error(np.array([analytic]), np.array([fd])))
        assert worst < self.TOL, f"full model step: {worst:.2e}"


# ---------------------------------------------------------------------------
# criterion: architecture shape / causality suite
# ---------------------------------------------------------------------------

def test_architecture_shape_and_causality():
    bundle = init_model(ModelConfig(seed=3))
    rng = np.random.default_rng(0)

    image = rng.uniform(-1, 1, (64, 64, 3))
    feats = encode_image(bundle, image)
    assert feats.shape == (64, bundle.config.d_vision)
    visual = project_features(bundle, feats)
    assert visual.shape == (64, bundle.config.d_model)

    prompt = tok.render_conversation([tok.Turn("user", "hello")], include_image=True,
                                     add_generation_prompt=True)
    merged = merge_sequence(bundle, prompt, visual)
    assert len(merged) == len(prompt.ids) - 1 + 64

    x = rng.standard_normal((40, bundle.config.d_model))
    base_logits = forward_lm(bundle, Tensor(x)).data
    for j in (7, 20, 39):
        bumped = x.copy()
        bumped[j] += rng.standard_normal(bundle.config.d_model)
        out = forward_lm(bundle, Tensor(bumped)).data
        assert out[:j].tobytes() == base_logits[:j].tobytes(), "future leaked backward"

    n = 108
    seq = rng.standard_normal((n, bundle.config.d_model))
    full = forward_lm(bundle, Tensor(seq)).data
    cache = KVCache(bundle.config)
    deviations = [np.max(np.abs(
        forward_lm(bundle, Tensor(seq[:8]), cache=cache).data - full[:8]))]
    for j in range(8, n):
        step = forward_lm(bundle, Tensor(seq[j:j + 1]), cache=cache).data
        deviations.append(np.max(np.abs(step[0] - full[j])))
    worst = float(max(deviations))
    assert worst < 1e-9, f"kv cache deviates by {worst:.2e}"
    passed("architecture shape/causality suite",
           visual_tokens=64, merge_law="L-1+64",
           kv_cache_max_dev=f"{worst:.1e}", decode_steps=n - 8 + 8)


# ---------------------------------------------------------------------------
# criterion: freeze invariant
# ---------------------------------------------------------------------------

def test_freeze_invariant_vision_bytes(pipeline):
    before, after = pipeline["vision_before"], pipeline["vision_after"]
    assert set(before) == set(after)
    for name in before:
        assert after[name] == before[name], f"VISION tensor {name} changed in INSTRUCT"
    # the comparator itself must catch a single flipped byte
    flipped = bytearray(next(iter(before.values())))
    flipped[len(flipped) // 2] ^= 0x01
    assert bytes(flipped) != next(iter(before.values()))
    passed("freeze invariant", vision_tensors=len(before), stage="INSTRUCT")


# ---------------------------------------------------------------------------
# criterion: convergence
# ---------------------------------------------------------------------------

def test_convergence_and_overfit(pipeline, tmp_path):
    align_log = pipeline["logs"]["ALIGN"]
    ma = align_log.moving_average()
    assert len(ma) == 300
    ratio = ma[299] / ma[19]
    assert ratio < 0.5, f"ma300/ma20 = {ratio:.3f}"

    write_caption_dataset(generate_caption_pairs(16, seed=7), tmp_path)
    t0 = time.monotonic()
    _, overfit_log = run_stage(
        init_model(ModelConfig(seed=0)),
        StageConfig("ALIGN", str(tmp_path / "align.jsonl"), steps=300, seed=2))
    overfit_secs = time.monotonic() - t0
    initial = overfit_log.losses()[0]
    final_ma = overfit_log.moving_average()[-1]
    overfit_ratio = final_ma / initial
    assert overfit_ratio < 0.1, f"overfit final ma {final_ma:.4f} vs initial {initial:.4f}"

    total = pipeline["timings"]["ALIGN"] + overfit_secs
    assert total < 600.0, f"convergence runs took {total:.0f}s"
    passed("convergence", align_ma_ratio=f"{ratio:.4f}",
           overfit_ratio=f"{overfit_ratio:.4f}", seconds=round(total))


# ---------------------------------------------------------------------------
# criterion: end-to-end pipeline accuracy
# ---------------------------------------------------------------------------

def test_end_to_end_pipeline_accuracy(pipeline):
    report = evaluate_split(pipeline["bundle"], pipeline["root"] / "vqa_test.jsonl")
    closed, opened = report.closed_accuracy_pct, report.open_recall_pct
    chain_secs = sum(pipeline["timings"].values())
    manifest = {
        "thresholds": {"closed_accuracy_pct": 80.0, "open_recall_pct": 60.0},
        "measured": {"closed_accuracy_pct": closed, "open_recall_pct": opened},
        "baselines": {"closed_majority_pct": 50.0, "open_zero_pct": 0.0},
        "chain_train_seconds": chain_secs,
        "stage_timings": pipeline["timings"],
    }
    (pipeline["root"] / "acceptance_manifest.json").write_text(
        json.dumps(manifest, indent=1))
    assert closed >= 80.0, f"closed accuracy {closed:.2f}% < 80%"
    assert opened >= 60.0, f"open recall {opened:.2f}% < 60%"
    assert chain_secs < 600.0, f"default chain took {chain_secs:.0f}s"
    passed("end-to-end pipeline", closed_pct=round(closed, 2),
           open_pct=round(opened, 2), train_seconds=round(chain_secs))


# ---------------------------------------------------------------------------
# criterion: metric oracle
# ---------------------------------------------------------------------------

def test_metric_oracle_and_echo_stub():
    import random

    from microvlm.evaluation import closed_accuracy, open_recall

    rng = random.Random(2024)
    n_pairs = 0
    for _ in range(10):
        closed_s, closed_p = random_pairs(rng, 50, closed=True)
        open_s, open_p = random_pairs(rng, 50, closed=False)
        assert closed_accuracy(closed_s, closed_p) == brute_closed(closed_s, closed_p)
        assert open_recall(open_s, open_p) == brute_open(open_s, open_p)
        n_pairs += 100

    from microvlm.datagen import generate_vqa_split
    train, _ = generate_vqa_split(16, 16, seed=5)
    report = evaluate_samples(train, echo_generator)
    assert report.closed_accuracy_pct == 100.0
    assert report.open_recall_pct == 100.0
    passed("metric oracle", randomized_pairs=n_pairs, echo_stub="100/100")


# ---------------------------------------------------------------------------
# criterion: budget checks
# ---------------------------------------------------------------------------

def test_budget_checks_at_reference_values():
    env = BudgetEnvelope()  # 10-30 W, 32 GiB

    def snap(power, util, rss):
        return TelemetrySnapshot(timestamp_ms=0, rss_bytes=rss, tokens_generated=0,
                                 tokens_per_second=0.0, power_w=power,
                                 utilization_pct=util)

    reference = sample(SimProvider(18.9, 62.0), GenerationCounters())
    assert reference.power_w == 18.9 and reference.utilization_pct == 62.0
    assert check_budget(snap(18.9, 62.0, int(11.9 * GIB)), env) == {"OK"}
    assert check_budget(snap(31.0, 62.0, int(11.9 * GIB)), env) == {"OVER_POWER"}
    assert check_budget(snap(30.0, 62.0, 32 * GIB), env) == {"OK"}  # inclusive bounds
    assert check_budget(snap(10.0, 62.0, 1), env) == {"OK"}
    assert check_budget(snap(9.99, 62.0, 1), env) == {"UNDER_POWER"}
    assert check_budget(snap(18.9, 62.0, 32 * GIB + 1), env) == {"OVER_MEMORY"}
    passed("budget checks", reference="18.9W/62%/11.9GiB -> OK",
           over="31W -> OVER_POWER", bounds="inclusive")


# ---------------------------------------------------------------------------
# criterion: checkpoint round trip and failure modes
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_and_distinct_errors():
    bundle = init_model(tiny_config(seed=8))
    blob = checkpoint_bytes(bundle)
    loaded = load_checkpoint_bytes(blob)
    assert checkpoint_bytes(loaded) == blob
    for n in bundle.params:
        assert loaded.params[n].data.tobytes() == bundle.params[n].data.tobytes()

    corrupted = b"XXXX" + blob[4:]
    with pytest.raises(CheckpointFormatError):
        load_checkpoint_bytes(corrupted)

    first_name = sorted(bundle.params)[0]
    cut = blob.index(first_name.encode()) + len(first_name) + 5
    with pytest.raises(CheckpointTruncatedError) as exc:
        load_checkpoint_bytes(blob[:cut])
    assert first_name in str(exc.value)
    passed("checkpoint", roundtrip="byte-identical",
           errors="format/version/truncated distinct")


# ---------------------------------------------------------------------------
# criterion: serving contract (no web UI involved)
# ---------------------------------------------------------------------------

def test_serving_contract():
    service = InferenceService(bundle=init_model(tiny_config(seed=12)),
                               provider=SimProvider(18.9, 62.0))
    server = create_server(service, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        status, body = _request(base, "/healthz")
        assert status == 200 and body == b"ok"

        payload = _chat_payload("same question", image_b64=_ppm_b64(seed=11), max_new=5)

        def hit(_):
            status, body = _request(base, "/v1/chat", payload)
            assert status == 200
            return json.loads(body)["answer"]

        with ThreadPoolExecutor(max_workers=5) as pool:
            answers = set(pool.map(hit, range(8)))
        assert len(answers) == 1

        status, raw = _request(base, "/v1/chat", payload,
                               headers={"Accept": "text/event-stream"})
        events = _parse_sse(raw)
        streamed = "".join(d["text"] for name, d in events if name == "token")
        done = [d for name, d in events if name == "done"][0]
        assert streamed == done["answer"] == next(iter(answers))

        status, body = _request(base, "/v1/chat", _chat_payload("x", image_b64="%%%"))
        assert status == 400 and json.loads(body)["error"]["code"] == "IMAGE_DECODE"
        status, body = _request(base, "/v1/chat", _chat_payload("y" * 2000))
        assert status == 413 and json.loads(body)["error"]["code"] == "PROMPT_OVERLENGTH"
    finally:
        server.shutdown()
        server.server_close()

    unloaded = InferenceService(bundle=None)
    server2 = create_server(unloaded, port=0)
    threading.Thread(target=server2.serve_forever, daemon=True).start()
    try:
        base2 = f"http://127.0.0.1:{server2.server_address[1]}"
        status, _ = _request(base2, "/healthz")
        assert status == 503
        status, body = _request(base2, "/v1/chat", _chat_payload("q"))
        assert status == 503 and json.loads(body)["error"]["code"] == "MODEL_NOT_LOADED"
    finally:
        server2.shutdown()
        server2.server_close()
    passed("serving contract", concurrency="identical answers",
           stream="concat == answer", health="200/503", errors="400/413 coded")
