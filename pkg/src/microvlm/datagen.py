"""Deterministic synthetic "toy medical" corpus.

Worlds are (modality, finding, location) triples rendered as colored glyphs
on a 64x64 canvas: the modality picks the background texture, the finding the
shape, the location the anchor quadrant. The task is solvable by
construction: :func:`classify_image` reads the triple straight back out of
the pixels, which the test suite uses to prove label/image consistency.

Three dataset flavors come out of here, in the schemas the pipeline (and any
drop-in real dataset) consumes:

- caption pairs for the alignment stage (conversation JSONL, one round)
- multi-turn conversations for instruction tuning (conversation JSONL)
- open/closed VQA splits for fine-tuning and evaluation (flat QA JSONL)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .images import encode_ppm
from .tokenizer import Turn

MODALITIES = ("xray", "mri", "ct", "histology", "pathology")
FINDINGS = ("mass", "fracture", "effusion", "none")
REAL_FINDINGS = ("mass", "fracture", "effusion")
LOCATIONS = ("left", "right", "upper", "lower")

CANVAS = 64
GLYPH_RADIUS = 9
JITTER = 3
STRIPE_PERIOD = 8
STRIPE_PHASE = 4
STRIPE_DELTA = 18

BACKGROUNDS = {
    "xray": (30, 30, 38),
    "mri": (22, 46, 22),
    "ct": (46, 32, 16),
    "histology": (60, 16, 46),
    "pathology": (14, 44, 58),
}
GLYPH_COLORS = {
    "mass": (235, 70, 70),
    "fracture": (240, 240, 80),
    "effusion": (80, 130, 240),
    "none": (205, 205, 205),
}
# anchor (col, row) per location
ANCHORS = {"left": (16, 32), "right": (48, 32), "upper": (32, 16), "lower": (32, 48)}

CAPTION_PROMPT = "Describe the image."
IMAGE_MARKER = "<image>\n"


class SchemaError(ValueError):
    """A dataset file does not match the expected JSONL schema."""


@dataclass(frozen=True)
class ToyWorld:
    modality: str
    finding: str
    location: str


@dataclass
class CaptionRecord:
    rid: str
    world: ToyWorld
    pixels: np.ndarray
    caption: str


@dataclass
class ConversationRecord:
    rid: str
    world: ToyWorld
    pixels: np.ndarray
    turns: list[Turn]


@dataclass
class QASample:
    qid: str
    image: str
    question: str
    answer: str
    answer_type: str  # "OPEN" | "CLOSED"
    pixels: np.ndarray | None = None


# ---------------------------------------------------------------------------
# rendering and the pixel-level oracle
# ---------------------------------------------------------------------------

def render_world(world: ToyWorld, seed: int) -> np.ndarray:
    """Render a world to 64x64x3 uint8 pixels; pure in (world, seed)."""
    rng = np.random.default_rng(seed)
    img = np.empty((CANVAS, CANVAS, 3), dtype=np.int16)
    img[:] = BACKGROUNDS[world.modality]
    img[STRIPE_PHASE::STRIPE_PERIOD] += STRIPE_DELTA

    cx, cy = ANCHORS[world.location]
    cx += int(rng.integers(-JITTER, JITTER + 1))
    cy += int(rng.integers(-JITTER, JITTER + 1))
    cols, rows = np.meshgrid(np.arange(CANVAS), np.arange(CANVAS))
    dx, dy = cols - cx, rows - cy
    r = GLYPH_RADIUS
    if world.finding == "mass":
        mask = dx * dx + dy * dy <= r * r
    elif world.finding == "fracture":
        box = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        mask = box & ((np.abs(dx - dy) <= 2) | (np.abs(dx + dy) <= 2))
    elif world.finding == "effusion":
        mask = (np.abs(dy) <= r) & (2 * np.abs(dx) <= r - dy)
    else:  # a hollow square marks "nothing found here"
        inside = np.maximum(np.abs(dx), np.abs(dy))
        mask = (inside <= r - 1) & (inside >= r - 3)
    img[mask] = GLYPH_COLORS[world.finding]
    return np.clip(img, 0, 255).astype(np.uint8)


def classify_image(pixels: np.ndarray) -> ToyWorld:
    """Recover the world from pixels by reading the glyph geometry.

    Independent of the renderer internals: background color names the
    modality, glyph color names the finding, glyph centroid names the
    location quadrant.
    """
    base = tuple(int(v) for v in pixels[0, 0])
    modality = next((m for m, c in BACKGROUNDS.items() if c == base), None)
    if modality is None:
        raise ValueError(f"background color {base} matches no modality")
    stripe = tuple(min(v + STRIPE_DELTA, 255) for v in base)
    flat = pixels.reshape(-1, 3)
    is_bg = (np.all(flat == base, axis=1) | np.all(flat == stripe, axis=1))
    glyph_idx = np.flatnonzero(~is_bg)
    if glyph_idx.size == 0:
        raise ValueError("no glyph pixels found")
    color = tuple(int(v) for v in flat[glyph_idx[0]])
    finding = next((f for f, c in GLYPH_COLORS.items() if c == color), None)
    if finding is None:
        raise ValueError(f"glyph color {color} matches no finding")
    rows, cols = np.divmod(glyph_idx, CANVAS)
    dx = cols.mean() - (CANVAS - 1) / 2
    dy = rows.mean() - (CANVAS - 1) / 2
    if abs(dx) > abs(dy):
        location = "left" if dx < 0 else "right"
    else:
        location = "upper" if dy < 0 else "lower"
    return ToyWorld(modality=modality, finding=finding, location=location)


def caption_for(world: ToyWorld) -> str:
    if world.finding == "none":
        return f"A {world.modality} image with no finding."
    return (f"A {world.modality} image showing a {world.finding} "
            f"in the {world.location} region.")


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _random_world(rng: np.random.Generator, require_finding: bool = False) -> ToyWorld:
    findings = REAL_FINDINGS if require_finding else FINDINGS
    return ToyWorld(
        modality=MODALITIES[rng.integers(len(MODALITIES))],
        finding=findings[rng.integers(len(findings))],
        location=LOCATIONS[rng.integers(len(LOCATIONS))],
    )


def _render_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 62))


def generate_caption_pairs(n: int, seed: int) -> list[CaptionRecord]:
    """n (image, caption) records for the alignment stage."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        world = _random_world(rng)
        pixels = render_world(world, _render_seed(rng))
        records.append(CaptionRecord(
            rid=f"align_{i:06d}", world=world, pixels=pixels, caption=caption_for(world)))
    return records


def _qa_round(world: ToyWorld, rng: np.random.Generator) -> tuple[str, str]:
    kinds = ["modality", "present", "yesno", "caption"]
    if world.finding != "none":
        kinds.append("where")
    kind = kinds[rng.integers(len(kinds))]
    if kind == "modality":
        return "What is the imaging modality?", f"The imaging modality is {world.modality}."
    if kind == "present":
        if world.finding == "none":
            return "What finding is present?", "There is no finding."
        return ("What finding is present?",
                f"There is a {world.finding} in the {world.location} region.")
    if kind == "where":
        return (f"Where is the {world.finding}?",
                f"The {world.finding} is in the {world.location} region.")
    if kind == "yesno":
        asked = REAL_FINDINGS[rng.integers(len(REAL_FINDINGS))]
        if asked == world.finding:
            return (f"Is there a {asked}?",
                    f"Yes, there is a {asked} in the {world.location} region.")
        return f"Is there a {asked}?", f"No, there is no {asked}."
    return CAPTION_PROMPT, caption_for(world)


def generate_conversations(n: int, turns: int, seed: int) -> list[ConversationRecord]:
    """n multi-turn conversations, `turns` user/assistant rounds each."""
    if turns < 1:
        raise ValueError(f"turns must be >= 1, got {turns}")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        world = _random_world(rng)
        pixels = render_world(world, _render_seed(rng))
        convo: list[Turn] = []
        for _ in range(turns):
            q, a = _qa_round(world, rng)
            convo.append(Turn("user", q))
            convo.append(Turn("assistant", a))
        records.append(ConversationRecord(
            rid=f"conv_{i:06d}", world=world, pixels=pixels, turns=convo))
    return records


def _vqa_samples(prefix: str, n_open: int, n_closed: int,
                 rng: np.random.Generator) -> list[QASample]:
    samples = []
    for i in range(n_closed):
        want_yes = i % 2 == 0
        if want_yes:
            world = _random_world(rng, require_finding=True)
            asked, answer = world.finding, "yes"
        else:
            world = _random_world(rng)
            candidates = [f for f in REAL_FINDINGS if f != world.finding]
            asked, answer = candidates[rng.integers(len(candidates))], "no"
        qid = f"{prefix}_closed_{i:06d}"
        samples.append(QASample(
            qid=qid, image=f"images/{qid}.ppm", question=f"Is there a {asked}?",
            answer=answer, answer_type="CLOSED",
            pixels=render_world(world, _render_seed(rng))))
    for i in range(n_open):
        if i % 2 == 0:
            world = _random_world(rng)
            question, answer = "What is the imaging modality?", world.modality
        else:
            world = _random_world(rng, require_finding=True)
            question, answer = f"Where is the {world.finding}?", world.location
        qid = f"{prefix}_open_{i:06d}"
        samples.append(QASample(
            qid=qid, image=f"images/{qid}.ppm", question=question,
            answer=answer, answer_type="OPEN",
            pixels=render_world(world, _render_seed(rng))))
    return samples


def generate_vqa_split(
    n_open: int,
    n_closed: int,
    seed: int,
    n_test_open: int | None = None,
    n_test_closed: int | None = None,
) -> tuple[list[QASample], list[QASample]]:
    """Train and test QA sets with disjoint images.

    The train set holds exactly (n_open, n_closed) samples; test sizes
    default to a quarter of the train sizes (at least 1 where train > 0).
    """
    if n_open < 0 or n_closed < 0:
        raise ValueError("sample counts must be >= 0")
    if n_test_open is None:
        n_test_open = max(1, n_open // 4) if n_open else 0
    if n_test_closed is None:
        n_test_closed = max(1, n_closed // 4) if n_closed else 0
    rng = np.random.default_rng(seed)
    train = _vqa_samples("vqa_train", n_open, n_closed, rng)
    test = _vqa_samples("vqa_test", n_test_open, n_test_closed, rng)
    return train, test


# ---------------------------------------------------------------------------
# on-disk schemas
# ---------------------------------------------------------------------------

def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def _write_image(out_dir: Path, rel: str, pixels: np.ndarray) -> None:
    path = out_dir / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ppm(pixels))


def write_caption_dataset(records: list[CaptionRecord], out_dir) -> Path:
    """align.jsonl in the conversation schema, one captioning round per image."""
    out_dir = Path(out_dir)
    rows = []
    for rec in records:
        rel = f"images/{rec.rid}.ppm"
        _write_image(out_dir, rel, rec.pixels)
        rows.append({
            "id": rec.rid,
            "image": rel,
            "conversations": [
                {"from": "human", "value": IMAGE_MARKER + CAPTION_PROMPT},
                {"from": "gpt", "value": rec.caption},
            ],
        })
    path = out_dir / "align.jsonl"
    _write_jsonl(path, rows)
    return path


def write_conversation_dataset(records: list[ConversationRecord], out_dir,
                               filename: str = "instruct.jsonl") -> Path:
    out_dir = Path(out_dir)
    rows = []
    for rec in records:
        rel = f"images/{rec.rid}.ppm"
        _write_image(out_dir, rel, rec.pixels)
        convo = []
        for j, turn in enumerate(rec.turns):
            value = turn.text if j else IMAGE_MARKER + turn.text
            convo.append({"from": "human" if turn.role == "user" else "gpt",
                          "value": value})
        rows.append({"id": rec.rid, "image": rel, "conversations": convo})
    path = out_dir / filename
    _write_jsonl(path, rows)
    return path


def write_vqa_dataset(samples: list[QASample], out_dir, filename: str) -> Path:
    out_dir = Path(out_dir)
    rows = []
    for s in samples:
        if s.pixels is not None:
            _write_image(out_dir, s.image, s.pixels)
        rows.append({"qid": s.qid, "image": s.image, "question": s.question,
                     "answer": s.answer, "answer_type": s.answer_type})
    path = out_dir / filename
    _write_jsonl(path, rows)
    return path


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
    return rows


def load_conversation_records(path) -> list[tuple[str, str | None, list[Turn], bool]]:
    """Parse conversation JSONL into (id, image path, turns, has_image)."""
    out = []
    for i, row in enumerate(read_jsonl(path)):
        where = f"{path}: record {i}"
        if not isinstance(row, dict) or "conversations" not in row:
            raise SchemaError(f"{where}: expected a conversation record with "
                              f"'conversations', got keys {sorted(row)}")
        turns = []
        has_image = False
        for j, msg in enumerate(row["conversations"]):
            if not (isinstance(msg, dict) and {"from", "value"} <= set(msg)):
                raise SchemaError(f"{where}: message {j} missing 'from'/'value'")
            role = {"human": "user", "gpt": "assistant"}.get(msg["from"])
            if role is None:
                raise SchemaError(f"{where}: unknown role '{msg['from']}'")
            value = msg["value"]
            marker = IMAGE_MARKER.rstrip("\n")
            if j == 0 and value.startswith(marker):
                has_image = True
                value = value[len(marker):].lstrip("\n")
            turns.append(Turn(role, value))
        out.append((row.get("id", str(i)), row.get("image"), turns, has_image))
    return out


def load_vqa_samples(path) -> list[QASample]:
    out = []
    required = {"qid", "image", "question", "answer", "answer_type"}
    for i, row in enumerate(read_jsonl(path)):
        if not isinstance(row, dict) or not required <= set(row):
            raise SchemaError(
                f"{path}: record {i}: expected QA keys {sorted(required)}, "
                f"got {sorted(row) if isinstance(row, dict) else type(row)}")
        if row["answer_type"] not in ("OPEN", "CLOSED"):
            raise SchemaError(f"{path}: record {i}: bad answer_type {row['answer_type']!r}")
        out.append(QASample(qid=row["qid"], image=row["image"], question=row["question"],
                            answer=row["answer"], answer_type=row["answer_type"]))
    return out


def generate_corpus(out_dir, n_captions: int = 512, n_conversations: int = 256,
                    turns: int = 2, n_vqa_open: int = 256, n_vqa_closed: int = 256,
                    n_test_open: int | None = None, n_test_closed: int | None = None,
                    seed: int = 0) -> dict[str, str]:
    """Emit the full toy corpus tree; returns the dataset file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    s_cap, s_conv, s_vqa = (int(rng.integers(0, 2 ** 62)) for _ in range(3))
    paths = {}
    paths["align"] = str(write_caption_dataset(
        generate_caption_pairs(n_captions, s_cap), out_dir))
    paths["instruct"] = str(write_conversation_dataset(
        generate_conversations(n_conversations, turns, s_conv), out_dir))
    train, test = generate_vqa_split(n_vqa_open, n_vqa_closed, s_vqa,
                                     n_test_open, n_test_closed)
    paths["vqa_train"] = str(write_vqa_dataset(train, out_dir, "vqa_train.jsonl"))
    paths["vqa_test"] = str(write_vqa_dataset(test, out_dir, "vqa_test.jsonl"))
    return paths
