"""Stepwise rewards for search-augmented reasoning.

Three signals are produced per episode:

* search reward: coverage gain over the gold evidence minus a redundancy
  penalty for documents already seen,
* sub-answer reward: the best improvement in token F1 against any gold
  sub-answer, divided by ``max(m, 1)``,
* answer reward: ``0.5 * EM + 0.5 * F1`` of the final answer.

The cumulative state (coverage, history, best F1) is an immutable
:class:`RewardState`; checkpoints pushed with :func:`snapshot` let the erasure
controller roll a state back exactly.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Optional, Sequence

from .corpus import Document, SparseVector, TfIdfIndex, cosine_similarity
from .metrics import Gold, exact_match, token_f1
from .trace import SegmentKind, Trace, anchor_positions, segment_layout

_EPS = 1e-12


class RewardKind(str, enum.Enum):
    SEARCH = "search"
    SUB_ANSWER = "sub_answer"
    ANSWER = "answer"


class RollbackError(RuntimeError):
    pass


class AttributionError(KeyError):
    pass


@dataclass(frozen=True)
class GoldTargets:
    gold_docs: tuple[Document, ...]
    gold_vectors: tuple[SparseVector, ...]
    gold_sub_answers: tuple[str, ...]
    gold_answer: tuple[str, ...]

    @property
    def n(self) -> int:
        return len(self.gold_docs)

    @property
    def m(self) -> int:
        return len(self.gold_sub_answers)

    @classmethod
    def build(cls, index: TfIdfIndex, evidence: Iterable[Document | str],
              sub_answers: Iterable[str], answer: Gold) -> "GoldTargets":
        docs = tuple(d if isinstance(d, Document) else Document.from_text(d) for d in evidence)
        answers = (answer,) if isinstance(answer, str) else tuple(answer)
        if not answers or not any(a.strip() for a in answers):
            raise ValueError("gold answer must be nonempty")
        return cls(docs, tuple(index.vector_for(d) for d in docs), tuple(sub_answers), answers)


@dataclass(frozen=True)
class Checkpoint:
    coverage: tuple[float, ...]
    history: frozenset[str]
    best_f1: tuple[float, ...]
    round_counter: int


@dataclass(frozen=True)
class RewardState:
    coverage: tuple[float, ...]
    history: frozenset[str] = frozenset()
    best_f1: tuple[float, ...] = ()
    round_counter: int = 0
    snapshots: tuple[Checkpoint, ...] = ()
    max_depth: Optional[int] = None

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.coverage, self.history, self.best_f1, self.round_counter)

    def to_dict(self, with_snapshots: bool = True) -> dict:
        def ck(c: Checkpoint) -> dict:
            return {"coverage": list(c.coverage), "history": sorted(c.history),
                    "best_f1": list(c.best_f1), "round_counter": c.round_counter}

        out = ck(self.checkpoint())
        if with_snapshots:
            out["snapshots"] = [ck(c) for c in self.snapshots]
        return out

    def to_json(self, with_snapshots: bool = True) -> str:
        return json.dumps(self.to_dict(with_snapshots), sort_keys=True)


class SearchScore(NamedTuple):
    reward: float
    gain: float
    penalty: float
    empty: bool


@dataclass(frozen=True)
class RewardAnnotation:
    round: int
    kind: RewardKind
    value: float
    anchor: int
    attempt: int = 0
    span: Optional[tuple[int, int]] = None
    note: str = ""

    def to_record(self) -> dict:
        rec = {"round": self.round, "kind": self.kind.value, "value": self.value,
               "anchor": self.anchor, "attempt": self.attempt}
        if self.span is not None:
            rec["span"] = list(self.span)
        if self.note:
            rec["note"] = self.note
        return rec


# -- state management --------------------------------------------------------


def init_state(gold: GoldTargets, max_depth: Optional[int] = None) -> RewardState:
    return RewardState((0.0,) * gold.n, frozenset(), (0.0,) * gold.m, 0, (), max_depth)


def snapshot(state: RewardState) -> RewardState:
    if state.max_depth is not None and len(state.snapshots) >= state.max_depth:
        raise RollbackError(f"snapshot stack limit {state.max_depth} reached")
    return replace(state, snapshots=state.snapshots + (state.checkpoint(),))


def restore(state: RewardState) -> RewardState:
    """Pop the most recent checkpoint and return to it."""
    if not state.snapshots:
        raise RollbackError("no checkpoint")
    c = state.snapshots[-1]
    return replace(state, coverage=c.coverage, history=c.history, best_f1=c.best_f1,
                   round_counter=c.round_counter, snapshots=state.snapshots[:-1])


def commit(state: RewardState) -> RewardState:
    """Drop the most recent checkpoint, keeping the current values."""
    if not state.snapshots:
        raise RollbackError("no checkpoint")
    return replace(state, snapshots=state.snapshots[:-1])


def begin_round(state: RewardState) -> RewardState:
    return replace(state, round_counter=state.round_counter + 1)


def _check(name: str, value: float, lo: float, hi: float) -> float:
    if not (lo - _EPS <= value <= hi + _EPS):
        raise ArithmeticError(f"{name} reward {value!r} outside [{lo}, {hi}]")
    return value


# -- the three rewards -------------------------------------------------------


class RewardEngine:
    """Reward computation bound to one example's gold targets and a TF-IDF index."""

    def __init__(self, gold: GoldTargets, index: TfIdfIndex, max_depth: Optional[int] = None):
        self.gold = gold
        self.index = index
        self.max_depth = max_depth

    def init_state(self) -> RewardState:
        return init_state(self.gold, self.max_depth)

    def search_reward(self, state: RewardState,
                      retrieved: Sequence[Document]) -> tuple[SearchScore, RewardState]:
        k = len(retrieved)
        if k == 0:
            return SearchScore(0.0, 0.0, 0.0, True), state
        vecs = [self.index.vector_for(d) for d in retrieved]
        coverage = list(state.coverage)
        total_gain = 0.0
        for i, g in enumerate(self.gold.gold_vectors):
            c = max(cosine_similarity(g, v) for v in vecs)
            total_gain += max(c - coverage[i], 0.0)
            coverage[i] = max(coverage[i], c)
        gain = total_gain / self.gold.n if self.gold.n else 0.0
        penalty = sum(1 for d in retrieved if d.doc_id in state.history) / k
        reward = _check("search", gain - penalty, -1.0, 1.0)
        new = replace(state, coverage=tuple(coverage),
                      history=state.history | {d.doc_id for d in retrieved})
        return SearchScore(reward, gain, penalty, False), new

    def sub_answer_reward(self, state: RewardState, sub_answer: str) -> tuple[float, RewardState]:
        m = self.gold.m
        best = list(state.best_f1)
        improvement = 0.0
        for i, gold in enumerate(self.gold.gold_sub_answers):
            f = token_f1(sub_answer, gold)
            if f > best[i]:
                improvement = max(improvement, f - best[i])
                best[i] = f
        reward = _check("sub-answer", improvement / max(m, 1), 0.0, 1.0 / max(m, 1))
        return reward, replace(state, best_f1=tuple(best))

    def final_reward(self, predicted: str) -> float:
        return final_reward(predicted, self.gold.gold_answer)


def final_reward(predicted: str, gold: Gold) -> float:
    return _check("answer", 0.5 * exact_match(predicted, gold) + 0.5 * token_f1(predicted, gold), 0.0, 1.0)


# -- attribution -------------------------------------------------------------

_ANCHOR_KIND = {
    RewardKind.SEARCH: SegmentKind.SEARCH,
    RewardKind.SUB_ANSWER: SegmentKind.SUB_ANSWER,
    RewardKind.ANSWER: SegmentKind.ANSWER,
}


def attribute(trace: Trace, rewards: Iterable[tuple[int, RewardKind, float]]) -> list[RewardAnnotation]:
    """Attach each ``(round, kind, value)`` reward to its closing-tag anchor.

    A sub-answer reward is anchored once, at ``</sub_answer>``, and carries the
    character span running from ``<observation>`` to ``</sub_answer>``.
    """
    anchors = anchor_positions(trace)
    starts = {(s.round, s.kind): s.start for s in segment_layout(trace)}
    out = []
    for rnd, kind, value in rewards:
        kind = RewardKind(kind)
        key = (rnd, _ANCHOR_KIND[kind])
        if key not in anchors:
            raise AttributionError(f"no {kind.value} anchor in round {rnd}")
        span = None
        if kind is RewardKind.SUB_ANSWER:
            obs = starts.get((rnd, SegmentKind.OBSERVATION))
            if obs is None:
                raise AttributionError(f"no observation anchor in round {rnd}")
            span = (obs, anchors[key] + 1)
        out.append(RewardAnnotation(rnd, kind, value, anchors[key], 0, span))
    return out
