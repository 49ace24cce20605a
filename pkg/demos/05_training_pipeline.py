"""A miniature run of the full tuning pipeline on a scratch corpus.

ALIGN (captions, everything trainable) -> INSTRUCT (conversations, vision
frozen) -> FINETUNE (VQA pairs, vision frozen), then both VQA metrics on the
held-out split. Sized to finish in about two minutes; the acceptance suite
runs the full-size version.

Run: python3 demos/05_training_pipeline.py
"""

import tempfile
import time
from pathlib import Path

from microvlm.checkpoint import load_checkpoint, save_checkpoint
from microvlm.datagen import generate_corpus
from microvlm.evaluation import evaluate_split
from microvlm.model import ModelConfig, init_model
from microvlm.training import StageConfig, run_stage

tmp = Path(tempfile.mkdtemp(prefix="microvlm_demo_"))
print(f"workspace: {tmp}")

generate_corpus(tmp, n_captions=64, n_conversations=32, turns=2,
                n_vqa_open=48, n_vqa_closed=48, n_test_open=16,
                n_test_closed=16, seed=0)

bundle = init_model(ModelConfig(seed=0))
print(f"fresh model: {bundle.param_count():,} parameters\n")

stages = [
    ("ALIGN", "align.jsonl", 60),
    ("INSTRUCT", "instruct.jsonl", 60),
    ("FINETUNE", "vqa_train.jsonl", 120),
]
for stage, data, steps in stages:
    t0 = time.time()
    cfg = StageConfig(stage, str(tmp / data), steps=steps, seed=1,
                      checkpoint_out=str(tmp / f"{stage.lower()}.tlvm"))
    bundle, log = run_stage(bundle, cfg)
    s = log.summary()
    frozen = ", ".join(sorted(cfg.freeze)) or "nothing"
    print(f"{stage:<9} {steps} steps in {time.time() - t0:5.1f}s  "
          f"loss {s['initial']:.3f} -> ma {s['final_moving_average']:.3f}  "
          f"(frozen: {frozen})")

print("\ncheckpoint lineage:", [e["stage"] for e in bundle.lineage])
roundtrip = load_checkpoint(tmp / "finetune.tlvm")
print("reload matches:", all(
    roundtrip.params[n].data.tobytes() == bundle.params[n].data.tobytes()
    for n in bundle.params))

report = evaluate_split(bundle, tmp / "vqa_test.jsonl", max_new=8)
print()
print(report.render_table())
print("(small corpus, few steps: accuracy is modest here; the acceptance "
      "suite trains the full default sizes)")
