"""Metric laws, checked against an independently written brute-force scorer."""

import random
import re

import numpy as np
import pytest

from microvlm.datagen import QASample, generate_vqa_split, write_vqa_dataset
from microvlm.evaluation import (
    EvalReport, closed_accuracy, echo_generator, evaluate_samples,
    normalize_answer, open_recall,
)


# -- independent oracle: regex normalization, hand-rolled loops ---------------

def brute_words(text):
    return re.sub(r"[!-/:-@\[-`{-~]", "", text.lower()).split()


def brute_closed(samples, predictions):
    good = 0
    for s in samples:
        words = brute_words(predictions[s.qid])
        gold = brute_words(s.answer)[0]
        if len(words) > 0 and words[0] == gold:
            good += 1
    return good / len(samples)


def brute_open(samples, predictions):
    import math
    per_sample = []
    for s in samples:
        gold, pred = [], []
        for w in brute_words(s.answer):
            if w not in gold:
                gold.append(w)
        for w in brute_words(predictions[s.qid]):
            if w not in pred:
                pred.append(w)
        per_sample.append(sum(1 for w in gold if w in pred) / len(gold))
    return math.fsum(per_sample) / len(per_sample)


WORDS = ["yes", "no", "left", "lung", "mass", "Xray", "REGION", "the", "a", "upper"]
DECOR = ["", ".", "!", ",", "  "]


def random_pairs(rng, n, closed):
    samples, predictions = [], {}
    for i in range(n):
        qid = f"q{i}"
        if closed:
            gold = rng.choice(["yes", "no"]) + rng.choice(DECOR)
        else:
            gold = " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 4)))
        pred = rng.choice(DECOR).join(
            rng.choice(WORDS) + rng.choice(DECOR) for _ in range(rng.randint(0, 6)))
        samples.append(QASample(qid=qid, image="", question="?", answer=gold,
                                answer_type="CLOSED" if closed else "OPEN"))
        predictions[qid] = pred
    return samples, predictions


def test_normalize_answer():
    assert normalize_answer("Yes.") == ["yes"]
    assert normalize_answer("  Left   LUNG ") == ["left", "lung"]
    assert normalize_answer("") == []
    assert normalize_answer("!?.,;") == []


def test_closed_accuracy_forced_cases():
    samples = [QASample("a", "", "?", "yes", "CLOSED"), QASample("b", "", "?", "yes", "CLOSED")]
    assert closed_accuracy(samples, {"a": "yes", "b": "yes"}) == 1.0
    assert closed_accuracy(samples, {"a": "Yes.", "b": "no"}) == 0.5
    with pytest.raises(ValueError, match="empty"):
        closed_accuracy([], {})
    with pytest.raises(ValueError, match="yes/no"):
        closed_accuracy([QASample("c", "", "?", "maybe", "CLOSED")], {"c": "yes"})
    with pytest.raises(KeyError):
        closed_accuracy(samples, {"a": "yes"})


def test_open_recall_forced_cases():
    s = [QASample("a", "", "?", "left lung", "OPEN")]
    assert open_recall(s, {"a": "the left lung shows opacity"}) == 1.0
    assert open_recall(s, {"a": "the heart"}) == 0.0
    assert open_recall(s, {"a": "lung"}) == 0.5
    with pytest.raises(ValueError, match="normalizes"):
        open_recall([QASample("b", "", "?", "...", "OPEN")], {"b": "x"})


def test_metrics_agree_with_brute_force_on_1000_random_pairs():
    rng = random.Random(123)
    for trial in range(10):
        closed_s, closed_p = random_pairs(rng, 50, closed=True)
        open_s, open_p = random_pairs(rng, 50, closed=False)
        assert closed_accuracy(closed_s, closed_p) == brute_closed(closed_s, closed_p)
        assert open_recall(open_s, open_p) == brute_open(open_s, open_p)


def test_metrics_order_independent():
    rng = random.Random(5)
    samples, preds = random_pairs(rng, 40, closed=False)
    base = open_recall(samples, preds)
    shuffled = samples[:]
    rng.shuffle(shuffled)
    assert open_recall(shuffled, preds) == base


def test_echo_stub_scores_perfect():
    train, _ = generate_vqa_split(8, 8, seed=0)
    report = evaluate_samples(train, echo_generator)
    assert report.open_recall_pct == 100.0
    assert report.closed_accuracy_pct == 100.0
    assert report.n_failed == 0


def test_constant_yes_on_balanced_split():
    train, _ = generate_vqa_split(0, 20, seed=1)
    report = evaluate_samples(train, lambda s, img: "yes")
    # balance law: half the golds are yes, within one sample quantum
    assert abs(report.closed_accuracy_pct - 50.0) <= 100.0 / 20


def test_report_recompute_and_round_trip():
    train, _ = generate_vqa_split(6, 6, seed=2)
    noisy = lambda s, img: s.answer if hash(s.qid) % 3 else "left something"
    report = evaluate_samples(train, noisy)
    assert report.recompute() == (report.open_recall_pct, report.closed_accuracy_pct)
    again = EvalReport.from_json(report.to_json())
    assert again == report
    table = report.render_table()
    assert "Open (%)" in table and "Closed (%)" in table


def test_failed_samples_counted_not_scored(tmp_path):
    train, _ = generate_vqa_split(4, 4, seed=3)

    def flaky(sample, image):
        if sample.qid.endswith("0"):
            raise RuntimeError("boom")
        return sample.answer
    report = evaluate_samples(train, flaky)
    assert report.n_failed == 2
    assert report.n_open + report.n_closed == 6
    assert report.open_recall_pct == 100.0 and report.closed_accuracy_pct == 100.0


def test_unreadable_image_is_a_failed_sample(tmp_path):
    train, _ = generate_vqa_split(2, 2, seed=4)
    write_vqa_dataset(train, tmp_path, "vqa.jsonl")
    (tmp_path / train[0].image).write_bytes(b"P5 broken")
    from microvlm.datagen import load_vqa_samples
    samples = load_vqa_samples(tmp_path / "vqa.jsonl")
    report = evaluate_samples(samples, lambda s, img: s.answer, images_root=tmp_path)
    assert report.n_failed == 1
    assert report.n_open + report.n_closed == 3
