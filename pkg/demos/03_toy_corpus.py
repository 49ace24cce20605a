"""The synthetic glyph corpus: worlds, rendering, and the solvability oracle.

Run: python3 demos/03_toy_corpus.py
"""

import tempfile
from pathlib import Path

from microvlm.datagen import (
    BACKGROUNDS, STRIPE_DELTA, ToyWorld, caption_for, classify_image,
    generate_corpus, generate_vqa_split, render_world,
)

world = ToyWorld(modality="mri", finding="mass", location="upper")
img = render_world(world, seed=42)
print(f"world: {world}")
print(f"caption: {caption_for(world)}")

bg = BACKGROUNDS[world.modality]
stripe = tuple(min(v + STRIPE_DELTA, 255) for v in bg)
print("\nrendered 64x64 canvas (glyph pixels shown as #):")
for r in range(0, 64, 2):
    row = "".join(
        "#" if tuple(img[r, c]) not in (bg, stripe) else "."
        for c in range(0, 64, 1))
    print(row)

print("\nthe pixel-reading classifier recovers the world:", classify_image(img))
print("(the test suite checks this for all 80 worlds: the task is solvable)")

train, test = generate_vqa_split(4, 4, seed=0)
print("\nsample VQA items:")
for s in train[:4]:
    print(f"  [{s.answer_type:>6}] {s.question}  ->  {s.answer}")
print("train/test image overlap:", {t.image for t in train} & {t.image for t in test})

with tempfile.TemporaryDirectory() as tmp:
    paths = generate_corpus(tmp, n_captions=4, n_conversations=2, turns=2,
                            n_vqa_open=2, n_vqa_closed=2, seed=0)
    print("\non-disk layout:")
    for p in sorted(Path(tmp).rglob("*")):
        if p.is_file():
            print("  ", p.relative_to(tmp))
