"""Staged tuning pipeline: ALIGN, INSTRUCT, FINETUNE.

Each stage samples batches deterministically from its seed, renders chat
sequences, splices visual tokens, and applies masked next-token loss with
Adam, skipping frozen parameter families. INSTRUCT always keeps the vision
encoder frozen; the other stages take their freeze sets from StageConfig.

Frozen-prefix subgraphs (vision, or vision+connector) run outside the tape,
which keeps their parameters byte-identical by construction and saves the
backward pass work.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen
from . import tokenizer as tok
from .checkpoint import save_checkpoint
from .images import load_image
from .model import (
    ModelBundle, N_VISUAL_TOKENS, encode_images, forward_lm, merge_sequence,
    project_features,
)
from .optim import AdamState, adam_step
from .tensor import (
    Tensor, backward, concat_rows, cross_entropy, embedding, recording,
    reshape, stack_rows, take_row,
)

STAGES = ("ALIGN", "INSTRUCT", "FINETUNE")

# lr / steps / freeze defaults, sized so the full default chain trains in
# under ten minutes on a 2-core desk CPU (see StageConfig docstring)
STAGE_DEFAULTS = {
    "ALIGN": {"lr": 3e-4, "steps": 300, "freeze": frozenset()},
    "INSTRUCT": {"lr": 1e-4, "steps": 300, "freeze": frozenset({"VISION"})},
    "FINETUNE": {"lr": 1e-4, "steps": 500, "freeze": frozenset({"VISION"})},
}

_FAMILY_OF_PREFIX = {"vision": "VISION", "connector": "CONNECTOR", "lm": "LM"}


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the 1-based step index."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class StageConfig:
    """One tuning stage.

    ALIGN trains everything on caption pairs (with from-scratch weights there
    is no pretrained backbone to protect), INSTRUCT tunes connector+LM with
    the vision encoder frozen, FINETUNE adapts to the VQA split, encoder
    still frozen. All three are overridable except the INSTRUCT vision
    freeze, which is an invariant.
    """
    stage: str
    data: str
    steps: int | None = None
    batch_size: int = 8
    lr: float | None = None
    freeze: frozenset[str] | None = None
    seed: int = 0
    weight_decay: float = 0.0
    checkpoint_out: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage '{self.stage}', expected one of {STAGES}")
        defaults = STAGE_DEFAULTS[self.stage]
        if self.steps is None:
            self.steps = defaults["steps"]
        if self.lr is None:
            self.lr = defaults["lr"]
        if self.freeze is None:
            self.freeze = defaults["freeze"]
        self.freeze = frozenset(self.freeze)
        for fam in self.freeze:
            if fam not in _FAMILY_OF_PREFIX.values():
                raise ValueError(f"unknown parameter family '{fam}' in freeze set")
        if self.stage == "INSTRUCT" and "VISION" not in self.freeze:
            raise ValueError("INSTRUCT requires the VISION family frozen")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class LossLog:
    """Per-step losses with a window-20 moving average summary."""
    entries: list[tuple[int, float]] = field(default_factory=list)
    window: int = 20

    def append(self, step: int, loss: float) -> None:
        if self.entries and step <= self.entries[-1][0]:
            raise ValueError(f"step ids must strictly increase, got {step}")
        self.entries.append((step, loss))

    def losses(self) -> list[float]:
        return [l for _, l in self.entries]

    def moving_average(self) -> list[float]:
        out, acc = [], 0.0
        vals = self.losses()
        for i, v in enumerate(vals):
            acc += v
            if i >= self.window:
                acc -= vals[i - self.window]
            out.append(acc / min(i + 1, self.window))
        return out

    def summary(self) -> dict:
        if not self.entries:
            return {"steps": 0, "initial": None, "final": None,
                    "final_moving_average": None}
        ma = self.moving_average()
        return {"steps": len(self.entries), "initial": self.entries[0][1],
                "final": self.entries[-1][1], "final_moving_average": ma[-1]}


def family_of(name: str) -> str:
    fam = _FAMILY_OF_PREFIX.get(name.split(".", 1)[0])
    if fam is None:
        raise KeyError(f"parameter '{name}' belongs to no family")
    return fam


def apply_freeze_mask(grads: dict[str, np.ndarray], freeze: frozenset[str] | set[str]
                      ) -> dict[str, np.ndarray]:
    """Zero the gradients of every parameter in a frozen family."""
    for fam in freeze:
        if fam not in _FAMILY_OF_PREFIX.values():
            raise KeyError(f"unknown parameter family '{fam}'")
    return {name: (np.zeros_like(g) if family_of(name) in freeze else g)
            for name, g in grads.items()}


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class _Sample:
    rendered: tok.RenderedSequence
    image: np.ndarray | None


def _load_stage_samples(cfg: StageConfig, max_seq_len: int) -> list[_Sample]:
    root = Path(cfg.data).parent
    image_cache: dict[str, np.ndarray] = {}

    def image_for(rel: str | None, has_image: bool) -> np.ndarray | None:
        if not has_image or rel is None:
            return None
        if rel not in image_cache:
            image_cache[rel] = load_image(root / rel)
        return image_cache[rel]

    samples: list[_Sample] = []
    if cfg.stage in ("ALIGN", "INSTRUCT"):
        for rid, rel, turns, has_image in datagen.load_conversation_records(cfg.data):
            rendered = tok.render_conversation(turns, include_image=has_image)
            budget = max_seq_len - (N_VISUAL_TOKENS - 1 if has_image else 0)
            rendered = tok.truncate(rendered, budget)
            samples.append(_Sample(rendered, image_for(rel, has_image)))
    else:
        for qa in datagen.load_vqa_samples(cfg.data):
            turns = [tok.Turn("user", qa.question), tok.Turn("assistant", qa.answer)]
            rendered = tok.render_conversation(turns, include_image=True)
            rendered = tok.truncate(rendered, max_seq_len - (N_VISUAL_TOKENS - 1))
            samples.append(_Sample(rendered, image_for(qa.image, True)))
    if not samples:
        raise datagen.SchemaError(f"{cfg.data}: no records")
    return samples


def _batch_loss(bundle: ModelBundle, batch: list[_Sample], freeze: frozenset[str]):
    """Taped forward over one batch; returns the scalar loss tensor."""
    p = bundle.params
    vision_frozen = "VISION" in freeze
    connector_frozen = vision_frozen and "CONNECTOR" in freeze

    visuals: dict[int, Tensor] = {}
    with_image = [i for i, s in enumerate(batch) if s.image is not None]
    if with_image:
        imgs = np.stack([batch[i].image for i in with_image])
        if connector_frozen:
            # whole visual path constant: run it untaped
            tokens = project_features(bundle, encode_images(bundle, imgs))
            for j, i in enumerate(with_image):
                visuals[i] = Tensor(tokens.data[j])
        else:
            if vision_frozen:
                feats = Tensor(encode_images(bundle, imgs).data)  # constant features
            else:
                feats = encode_images(bundle, imgs)
            tokens = project_features(bundle, feats)
            for j, i in enumerate(with_image):
                visuals[i] = take_row(tokens, j)

    merged = []
    for i, s in enumerate(batch):
        merged.append(merge_sequence(bundle, s.rendered, visuals.get(i)))

    max_len = max(len(m) for m in merged)
    rows, ids, ignore = [], [], []
    pad_row = np.full(1, tok.PAD, dtype=np.int64)
    for m in merged:
        pad = max_len - len(m)
        emb = m.embedded
        if pad:
            emb = concat_rows([emb, embedding(p["lm.tok_emb"], np.full(pad, tok.PAD))])
        rows.append(emb)
        full_ids = np.concatenate([m.ids, np.full(pad, tok.PAD, dtype=np.int64)])
        full_mask = np.concatenate([m.loss_mask, np.zeros(pad, dtype=bool)])
        # next-token loss: shift targets left, never score the last position
        ids.append(np.concatenate([full_ids[1:], pad_row]))
        ignore.append(np.concatenate([~full_mask[1:], [True]]))
    x = stack_rows(rows)
    logits = forward_lm(bundle, x)
    flat = reshape(logits, (len(batch) * max_len, bundle.config.vocab_size))
    return cross_entropy(flat, np.concatenate(ids), np.concatenate(ignore))


def run_stage(bundle: ModelBundle, cfg: StageConfig, on_step=None
              ) -> tuple[ModelBundle, LossLog]:
    """Run one tuning stage; returns the updated bundle and the loss log.

    The input bundle is never mutated. Frozen-family tensors are carried over
    untouched. Aborts with TrainingDivergedError on a non-finite loss.
    """
    samples = _load_stage_samples(cfg, bundle.config.max_seq_len)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    log = LossLog()
    current = ModelBundle(config=bundle.config, params=dict(bundle.params),
                          lineage=list(bundle.lineage))
    trainable = [n for n in current.params if family_of(n) not in cfg.freeze]

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(samples), size=cfg.batch_size)
        batch = [samples[int(i)] for i in idx]
        with recording() as tape:
            loss = _batch_loss(current, batch, cfg.freeze)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(step, loss_val)
        backward(loss, tape)
        grads = {n: (current.params[n].grad if current.params[n].grad is not None
                     else np.zeros(current.params[n].shape))
                 for n in trainable}
        grads = apply_freeze_mask(grads, cfg.freeze)
        updated, state = adam_step(
            {n: current.params[n] for n in trainable}, grads, state,
            lr=cfg.lr, weight_decay=cfg.weight_decay)
        current.params.update(updated)
        for n in trainable:
            current.params[n].grad = None
        log.append(step, loss_val)
        if on_step is not None:
            on_step(step, loss_val)

    if cfg.steps > 0:
        current.lineage.append({"stage": cfg.stage, "steps": cfg.steps,
                                "seed": cfg.seed, "data": str(cfg.data)})
    if cfg.checkpoint_out:
        save_checkpoint(current, cfg.checkpoint_out)
    return current, log


def export_loss_csv(log: LossLog, path) -> None:
    """CSV with header step,loss; float repr round-trips exactly."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in log.entries:
            writer.writerow([step, repr(loss)])
