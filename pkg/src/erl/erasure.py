"""Erasure decisions and their application to a trace and reward state.

Three operators are supported:

* plan erasure: the round-1 search scored at or below ``beta_plan``; the whole
  trajectory is reset to the bare question,
* search erasure: a search in round ``t > 1`` scored at or below ``alpha``; the
  query and its evidence are removed, the round's observation and sub-answer stay,
* sub-answer erasure: a sub-answer scored at or below ``alpha``; the round's
  observation, sub-answer and anything after them are removed.

Each operator has a retry budget. Once it is spent the failing attempt is kept
and the episode moves on.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Mapping

from . import rewards
from .rewards import RewardState
from .trace import Round, SegmentKind, Trace, serialize_trace


class ErasureKind(str, enum.Enum):
    NONE = "none"
    ERASE_PLAN = "erase_plan"
    ERASE_SEARCH = "erase_search"
    ERASE_SUB_ANSWER = "erase_sub_answer"


class Stage(str, enum.Enum):
    AFTER_SEARCH = "after_search"
    AFTER_SUB_ANSWER = "after_sub_answer"


@dataclass(frozen=True)
class ErasureConfig:
    alpha: float = 0.05
    beta_plan: float = 0.02
    max_retries_plan: int = 3
    max_retries_search: int = 3
    max_retries_sub_answer: int = 3
    max_rounds: int = 8
    enabled: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta_plan)):
            raise ValueError("erasure thresholds must be finite")
        for name in ("max_retries_plan", "max_retries_search", "max_retries_sub_answer"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")

    def budget(self, kind: ErasureKind) -> int:
        return {
            ErasureKind.ERASE_PLAN: self.max_retries_plan,
            ErasureKind.ERASE_SEARCH: self.max_retries_search,
            ErasureKind.ERASE_SUB_ANSWER: self.max_retries_sub_answer,
        }[kind]


@dataclass(frozen=True)
class ErasureDecision:
    kind: ErasureKind
    round: int
    trigger_value: float
    threshold_used: float
    category: ErasureKind = ErasureKind.NONE
    budget_exhausted: bool = False

    @property
    def fires(self) -> bool:
        return self.kind is not ErasureKind.NONE


@dataclass(frozen=True)
class ErasureEvent:
    round: int
    decision: ErasureDecision
    attempt: int
    budget_exhausted: bool

    def to_record(self) -> dict:
        return {
            "round": self.round,
            "kind": self.decision.category.value,
            "erased": self.decision.fires,
            "trigger": self.decision.trigger_value,
            "threshold": self.decision.threshold_used,
            "attempt": self.attempt,
            "budget_exhausted": self.budget_exhausted,
        }


def _candidate(rnd: int, stage: Stage, config: ErasureConfig) -> tuple[ErasureKind, float]:
    if stage is Stage.AFTER_SUB_ANSWER:
        if rnd <= 1:
            raise ValueError("round 1 has no sub-answer stage")
        return ErasureKind.ERASE_SUB_ANSWER, config.alpha
    if rnd < 1:
        raise ValueError(f"invalid round {rnd}")
    if rnd == 1:
        return ErasureKind.ERASE_PLAN, config.beta_plan
    return ErasureKind.ERASE_SEARCH, config.alpha


def decide(rnd: int, stage: Stage, reward_value: float, config: ErasureConfig,
           attempts_so_far: Mapping[ErasureKind, int]) -> ErasureDecision:
    """Pick the erasure for a scored stage; ``attempts_so_far`` counts erasures already spent."""
    stage = Stage(stage)
    kind, threshold = _candidate(rnd, stage, config)
    if not config.enabled or reward_value > threshold:
        return ErasureDecision(ErasureKind.NONE, rnd, reward_value, threshold, kind)
    if attempts_so_far.get(kind, 0) >= config.budget(kind):
        return ErasureDecision(ErasureKind.NONE, rnd, reward_value, threshold, kind, True)
    return ErasureDecision(kind, rnd, reward_value, threshold, kind)


class ErasureController:
    """Per-episode budgets and event log. Plan budget is per episode, the others per round."""

    def __init__(self, config: ErasureConfig):
        self.config = config
        self.events: list[ErasureEvent] = []
        self._spent: Counter = Counter()

    def _key(self, kind: ErasureKind, rnd: int) -> tuple[ErasureKind, int]:
        return (kind, 0) if kind is ErasureKind.ERASE_PLAN else (kind, rnd)

    def spent(self, kind: ErasureKind, rnd: int) -> int:
        return self._spent[self._key(kind, rnd)]

    def remaining(self, kind: ErasureKind, rnd: int) -> int:
        return self.config.budget(kind) - self.spent(kind, rnd)

    def decide(self, rnd: int, stage: Stage, reward_value: float) -> ErasureDecision:
        kind, _ = _candidate(rnd, Stage(stage), self.config)
        d = decide(rnd, stage, reward_value, self.config, {kind: self.spent(kind, rnd)})
        if d.fires:
            self._spent[self._key(kind, rnd)] += 1
            self.events.append(ErasureEvent(rnd, d, self.spent(kind, rnd), False))
        elif d.budget_exhausted:
            self.events.append(ErasureEvent(rnd, d, self.spent(kind, rnd) + 1, True))
        return d

    def charge(self, kind: ErasureKind, rnd: int) -> bool:
        """Spend one retry on a malformed generation. False once the budget is gone."""
        if self.remaining(kind, rnd) <= 0:
            return False
        self._spent[self._key(kind, rnd)] += 1
        return True


def apply(trace: Trace, decision: ErasureDecision, state: RewardState) -> tuple[Trace, RewardState]:
    """Erase the segments named by ``decision`` and roll the reward state back to match."""
    t = decision.round
    if decision.kind is ErasureKind.NONE:
        raise ValueError("nothing to apply for a NONE decision")
    if not state.snapshots:
        raise rewards.RollbackError("cannot roll back: no checkpoint")

    if decision.kind is ErasureKind.ERASE_PLAN:
        if t != 1 or not trace.rounds or trace.rounds[0].query is None:
            raise ValueError("plan erasure needs a round-1 search")
        out = Trace(trace.question)
        while state.snapshots:
            state = rewards.restore(state)
    elif decision.kind is ErasureKind.ERASE_SEARCH:
        if t < 2 or len(trace.rounds) < t or trace.rounds[t - 1].query is None:
            raise ValueError(f"round {t} has no search to erase")
        rnd = trace.rounds[t - 1]
        prefixes = {k: v for k, v in rnd.prefixes.items()
                    if k not in (SegmentKind.SEARCH, SegmentKind.INFORMATION)}
        kept = replace(rnd, query=None, information=None, prefixes=prefixes)
        out = Trace(trace.question, trace.rounds[:t - 1] + (kept,))
        state = rewards.restore(state)
    else:
        if t < 2 or len(trace.rounds) < t or trace.rounds[t - 1].sub_answer is None:
            raise ValueError(f"round {t} has no sub-answer to erase")
        out = trace.truncated(t - 1)
        state = rewards.restore(state)

    serialize_trace(out)  # revalidate
    return out, state
