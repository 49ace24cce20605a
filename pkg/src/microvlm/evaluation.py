"""VQA scoring: exact-match accuracy for closed questions, token recall for open.

Both metrics work on normalized word sequences (lowercase, ASCII punctuation
stripped). Open recall deduplicates gold tokens: score = |gold set covered| /
|gold set|, the convention the rest of the toolchain assumes, documented here
because other definitions exist. Closed scoring reads only the first
normalized word of the prediction, so verbose generations cannot game a
substring match.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tokenizer as tok
from .datagen import QASample, load_vqa_samples
from .images import load_image, normalize
from .model import DecodePolicy, ModelBundle, generate

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return [w for w in text.lower().translate(_PUNCT_TABLE).split() if w]


def _score_closed(gold: str, prediction: str, qid: str = "?") -> float:
    gold_words = normalize_answer(gold)
    if gold_words not in (["yes"], ["no"]):
        raise ValueError(f"closed gold for '{qid}' is not yes/no: {gold!r}")
    pred = normalize_answer(prediction)
    return float(bool(pred) and pred[0] == gold_words[0])


def _score_open(gold: str, prediction: str, qid: str = "?") -> float:
    gold_set = set(normalize_answer(gold))
    if not gold_set:
        raise ValueError(f"open gold for '{qid}' normalizes to nothing: {gold!r}")
    pred_set = set(normalize_answer(prediction))
    return len(gold_set & pred_set) / len(gold_set)


def closed_accuracy(samples: list[QASample], predictions: dict[str, str]) -> float:
    """Exact match of the prediction's first normalized word against yes/no gold."""
    if not samples:
        raise ValueError("closed_accuracy: empty sample set, metric undefined")
    return _mean([_score_closed(s.answer, _pred_for(s, predictions), s.qid)
                  for s in samples])


def open_recall(samples: list[QASample], predictions: dict[str, str]) -> float:
    """Mean per-sample recall of unique gold words by the predicted words."""
    if not samples:
        raise ValueError("open_recall: empty sample set, metric undefined")
    return _mean([_score_open(s.answer, _pred_for(s, predictions), s.qid)
                  for s in samples])


def _mean(values: list[float]) -> float:
    # exactly rounded sum: the mean is independent of sample order
    return math.fsum(values) / len(values)


def _pred_for(sample: QASample, predictions: dict[str, str]) -> str:
    if sample.qid not in predictions:
        raise KeyError(f"no prediction for qid '{sample.qid}'")
    return predictions[sample.qid]


@dataclass
class SampleScore:
    qid: str
    answer_type: str
    gold: str
    prediction: str
    score: float


@dataclass
class EvalReport:
    """Aggregate metrics plus the per-sample records they derive from."""
    dataset: str
    n_open: int
    n_closed: int
    open_recall_pct: float | None
    closed_accuracy_pct: float | None
    n_failed: int = 0
    samples: list[SampleScore] = field(default_factory=list)

    def recompute(self) -> tuple[float | None, float | None]:
        """Aggregates from per-sample records; must equal the stored fields."""
        opens = [s.score for s in self.samples if s.answer_type == "OPEN"]
        closed = [s.score for s in self.samples if s.answer_type == "CLOSED"]
        return (100.0 * _mean(opens) if opens else None,
                100.0 * _mean(closed) if closed else None)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["samples"] = [SampleScore(**s) for s in d["samples"]]
        return cls(**d)

    def render_table(self) -> str:
        """Fixed-width comparison row, shaped like a leaderboard table."""
        def fmt(v):
            return f"{v:.2f}" if v is not None else "n/a"
        header = f"{'Dataset':<24}{'Open (%)':>12}{'Closed (%)':>12}"
        rule = "-" * len(header)
        row = (f"{self.dataset:<24}{fmt(self.open_recall_pct):>12}"
               f"{fmt(self.closed_accuracy_pct):>12}")
        return "\n".join([header, rule, row, ""])


def make_model_generator(bundle: ModelBundle, policy: DecodePolicy | None = None,
                         max_new: int = 48) -> Callable[[QASample, np.ndarray | None], str]:
    """Wrap a bundle as the (sample, image) -> answer callable evaluate() uses."""
    def gen(sample: QASample, image: np.ndarray | None) -> str:
        rendered = tok.render_conversation(
            [tok.Turn("user", sample.question)],
            include_image=image is not None, add_generation_prompt=True)
        return generate(bundle, rendered, image=image, policy=policy, max_new=max_new).text
    return gen


def echo_generator(sample: QASample, image) -> str:
    """Oracle stub: answers with the gold label. Scores 100/100 by definition."""
    return sample.answer


def evaluate_samples(samples: list[QASample], generate_fn, images_root=None,
                     dataset_name: str = "toy") -> EvalReport:
    """Run the generator over a split and score per answer_type.

    Unreadable images or generator failures exclude the sample and count it
    in n_failed rather than silently inflating the metrics.
    """
    root = Path(images_root) if images_root is not None else None
    scored: list[SampleScore] = []
    n_failed = 0
    for s in samples:
        try:
            image = None
            if s.image:
                if s.pixels is not None:
                    image = normalize(s.pixels)
                else:
                    image = load_image((root / s.image) if root else s.image)
            prediction = generate_fn(s, image)
        except Exception:
            n_failed += 1
            continue
        scorer = _score_open if s.answer_type == "OPEN" else _score_closed
        scored.append(SampleScore(qid=s.qid, answer_type=s.answer_type, gold=s.answer,
                                  prediction=prediction,
                                  score=scorer(s.answer, prediction, s.qid)))
    opens = [s.score for s in scored if s.answer_type == "OPEN"]
    closed = [s.score for s in scored if s.answer_type == "CLOSED"]
    return EvalReport(
        dataset=dataset_name, n_open=len(opens), n_closed=len(closed),
        open_recall_pct=100.0 * _mean(opens) if opens else None,
        closed_accuracy_pct=100.0 * _mean(closed) if closed else None,
        n_failed=n_failed, samples=scored)


def evaluate_split(bundle: ModelBundle, split_path, policy: DecodePolicy | None = None,
                   max_new: int = 48) -> EvalReport:
    """Load a VQA JSONL split and evaluate the model on it with greedy decode."""
    split_path = Path(split_path)
    samples = load_vqa_samples(split_path)
    gen = make_model_generator(bundle, policy=policy, max_new=max_new)
    return evaluate_samples(samples, gen, images_root=split_path.parent,
                            dataset_name=split_path.stem)
