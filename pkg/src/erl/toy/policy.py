"""Tabular softmax policy over discrete templates, and the agent that renders it into text.

Decision points are keyed by ``(round, stage)``. Each stage has a fixed list of
template actions; the agent turns a sampled action into the text the rollout
engine expects, so the same engine drives scripted, external and toy policies.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..rollout import GenerationRequest, PolicyStage
from ..trace import parse_trace
from .world import parse_fact

_QUESTION_ENTITY = re.compile(r"of (\w+)\?\s*$")
NO_INFORMATION = "No relevant information was found."


def search_templates(relations) -> list[tuple]:
    out = [("rel", r, "current") for r in relations]
    out += [("rel", r, "question") for r in relations]
    out.append(("question",))
    return out


def action_space(relations, top_k: int) -> dict[PolicyStage, list[tuple]]:
    searches = search_templates(relations)
    return {
        PolicyStage.SEARCH: searches,
        PolicyStage.OBSERVATION: [("rank", i) for i in range(top_k)],
        PolicyStage.SUB_ANSWER: [("object",), ("subject",), ("question",)],
        PolicyStage.ANSWER_OR_SEARCH: [("answer", "current"), ("answer", "question")] + searches,
    }


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass
class SoftmaxPolicy:
    """Logit table ``theta[(round, stage)]``; unseen keys start at zero (uniform)."""

    sizes: dict[PolicyStage, int]
    theta: dict[tuple[int, PolicyStage], np.ndarray] = field(default_factory=dict)

    def logits(self, key) -> np.ndarray:
        arr = self.theta.get(key)
        if arr is None:
            arr = self.theta[key] = np.zeros(self.sizes[key[1]])
        return arr

    def probs(self, key) -> np.ndarray:
        return softmax(self.logits(key))

    def log_prob(self, key, action: int) -> float:
        return float(log_softmax(self.logits(key))[action])

    def copy(self) -> "SoftmaxPolicy":
        return SoftmaxPolicy(dict(self.sizes), {k: v.copy() for k, v in self.theta.items()})

    def to_record(self) -> dict:
        return {
            "sizes": {s.value: n for s, n in self.sizes.items()},
            "theta": [{"round": r, "stage": s.value, "logits": v.tolist()}
                      for (r, s), v in sorted(self.theta.items(), key=lambda kv: (kv[0][0], kv[0][1].value))],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SoftmaxPolicy":
        pol = cls({PolicyStage(s): int(n) for s, n in rec["sizes"].items()})
        for item in rec["theta"]:
            pol.theta[(item["round"], PolicyStage(item["stage"]))] = np.array(item["logits"], dtype=float)
        return pol


@dataclass
class Decision:
    key: tuple[int, PolicyStage]
    action: int
    log_prob: float
    text: str


class ToyAgent:
    """Per-episode adapter from a :class:`SoftmaxPolicy` to the rollout engine's policy interface.

    With ``rng=None`` it acts greedily (lowest index wins ties).
    """

    def __init__(self, policy: SoftmaxPolicy, actions: dict[PolicyStage, list[tuple]],
                 rng: Optional[np.random.Generator] = None):
        self.policy = policy
        self.actions = actions
        self.rng = rng
        self.decisions: list[Decision] = []
        self._observed: Optional[str] = None

    def _choose(self, key) -> int:
        p = self.policy.probs(key)
        if self.rng is None:
            return int(np.argmax(p))
        return int(self.rng.choice(len(p), p=p))

    def generate(self, request: GenerationRequest) -> str:
        key = (request.round, request.stage)
        action = self._choose(key)
        text = self._render(request, self.actions[request.stage][action])
        self.decisions.append(Decision(key, action, self.policy.log_prob(key, action), text))
        return text

    # -- rendering ----------------------------------------------------------

    def _render(self, request: GenerationRequest, action: tuple) -> str:
        stage = request.stage
        if stage is PolicyStage.SUB_ANSWER:
            return self._sub_answer(request.context, action)
        trace = parse_trace(request.context)
        if stage is PolicyStage.OBSERVATION:
            docs = trace.rounds[-1].evidence if trace.rounds else []
            if not docs:
                self._observed = None
                return NO_INFORMATION
            doc = docs[min(action[1], len(docs) - 1)]
            self._observed = doc.text.strip()
            return self._observed
        qent = _question_entity(trace.question)
        current = next((r.sub_answer.strip() for r in reversed(trace.rounds) if r.sub_answer), qent)
        if action[0] == "answer":
            return f"<answer>{current if action[1] == 'current' else qent}</answer>"
        query = _query(action, trace.question, current, qent)
        return query if stage is PolicyStage.SEARCH else f"<search>{query}</search>"

    def _sub_answer(self, context: str, action: tuple) -> str:
        if action[0] == "question":
            m = _QUESTION_ENTITY.search(context.split("\n", 1)[0])
            return m.group(1) if m else "unknown"
        fact = parse_fact(self._observed) if self._observed else None
        if fact is None:
            return "unknown"
        return fact[2] if action[0] == "object" else fact[1]


def _question_entity(question: str) -> str:
    m = _QUESTION_ENTITY.search(question)
    return m.group(1) if m else question


def _query(action: tuple, question: str, current: str, qent: str) -> str:
    if action[0] == "question":
        return question
    _, rel, src = action
    return f"{rel} of {current if src == 'current' else qent}"
