"""Word-level exact match / F1 with the usual QA answer normalization."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

Gold = Union[str, Sequence[str]]

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _golds(gold: Gold) -> list[str]:
    golds = [gold] if isinstance(gold, str) else list(gold)
    if not golds:
        raise ValueError("gold answer set is empty")
    return golds


def exact_match(predicted: str, gold: Gold) -> int:
    pred = normalize_answer(predicted)
    return int(any(pred == normalize_answer(g) for g in _golds(gold)))


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(predicted: str, gold: Gold) -> float:
    """Bag-of-tokens F1; against a gold set, the best over the set."""
    pred = normalize_answer(predicted).split()
    return max(_f1(pred, normalize_answer(g).split()) for g in _golds(gold))


@dataclass
class ExampleScore:
    example_id: str
    em: int
    f1: float
    predicted: str | None
    golds: list[str]


@dataclass
class EvalReport:
    count: int
    em: float
    f1: float
    examples: list[ExampleScore] = field(default_factory=list)

    def to_records(self) -> list[dict]:
        rows = [
            {"id": s.example_id, "em": s.em, "f1": s.f1, "predicted": s.predicted, "golds": s.golds}
            for s in self.examples
        ]
        rows.append({"summary": True, "count": self.count, "em": self.em, "f1": self.f1})
        return rows

    def table(self) -> str:
        return f"{'count':>6} {'EM':>6} {'F1':>6}\n{self.count:>6d} {self.em:6.3f} {self.f1:6.3f}"

    def summary_line(self) -> str:
        return f"EM {self.em:.3f} F1 {self.f1:.3f}"


def evaluate_run(predictions: Iterable[tuple[str, str | None]], golds: Mapping[str, Gold]) -> EvalReport:
    """Score ``(example_id, predicted_answer)`` pairs; a missing answer scores 0/0."""
    predictions = list(predictions)
    unknown = sorted({eid for eid, _ in predictions if eid not in golds})
    if unknown:
        raise KeyError(f"unknown example ids: {', '.join(unknown)}")
    scores = []
    for eid, pred in predictions:
        gold = _golds(golds[eid])
        if pred is None:
            em, f1 = 0, 0.0
        else:
            em, f1 = exact_match(pred, gold), token_f1(pred, gold)
        scores.append(ExampleScore(eid, em, f1, pred, gold))
    n = len(scores)
    if n == 0:
        return EvalReport(0, 0.0, 0.0, [])
    return EvalReport(n, sum(s.em for s in scores) / n, sum(s.f1 for s in scores) / n, scores)
