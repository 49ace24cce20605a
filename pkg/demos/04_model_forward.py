"""The architecture end to end: patches, connector, decoder, KV-cached decode.

Run: python3 demos/04_model_forward.py
"""

import numpy as np

from microvlm import tokenizer as tok
from microvlm.datagen import ToyWorld, render_world
from microvlm.images import normalize
from microvlm.model import (
    KVCache, ModelConfig, encode_image, forward_lm, generate, init_model,
    merge_sequence, project_features,
)
from microvlm.tensor import Tensor

cfg = ModelConfig(seed=7)
bundle = init_model(cfg)
print(f"model: {bundle.param_count():,} parameters")
for family in ("VISION", "CONNECTOR", "LM"):
    n = sum(bundle.params[p].size for p in bundle.names_in_family(family))
    print(f"  {family:<10} {n:>9,}")

image = normalize(render_world(ToyWorld("xray", "effusion", "left"), seed=1))
feats = encode_image(bundle, image)
print(f"\nvision encoder: {image.shape} image -> {feats.shape} patch features")
visual = project_features(bundle, feats)
print(f"connector:      {feats.shape} -> {visual.shape} visual tokens")

prompt = tok.render_conversation([tok.Turn("user", "Where is the effusion?")],
                                 include_image=True, add_generation_prompt=True)
merged = merge_sequence(bundle, prompt, visual)
print(f"merge law:      {len(prompt.ids)} text positions -> {len(merged)} merged "
      f"(= L - 1 + 64)")

logits = forward_lm(bundle, merged.embedded)
print(f"decoder:        logits {logits.shape}")

print("\ncausality: perturbing position 20 leaves logits before it bit-identical")
x = merged.embedded.data.copy()
x[20] += 1.0
assert forward_lm(bundle, Tensor(x)).data[:20].tobytes() == logits.data[:20].tobytes()
print("  holds")

print("\nKV cache equals the full forward:")
cache = KVCache(cfg)
step_logits = [forward_lm(bundle, Tensor(merged.embedded.data[:1]), cache=cache).data]
for i in range(1, len(merged)):
    step_logits.append(forward_lm(bundle, Tensor(merged.embedded.data[i:i + 1]),
                                  cache=cache).data)
dev = np.max(np.abs(np.vstack(step_logits) - logits.data))
print(f"  max deviation over {len(merged)} positions: {dev:.2e}")

out = generate(bundle, prompt, image=image, max_new=12)
print(f"\nuntrained greedy sample ({len(out.token_ids)} tokens): {out.text!r}")
print("(train it first: see demos/05_training_pipeline.py)")
