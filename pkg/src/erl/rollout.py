"""Episode orchestration: the staged round loop with rewards and erasure.

Round 1 issues a search only. Every later round generates an observation and
a sub-answer, then either another search or the final answer. Each scored
stage goes through the :class:`~erl.erasure.ErasureController`; an erased
stage is regenerated from the truncated trace, up to its retry budget.
"""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Optional, Protocol, Sequence, Union

from . import erasure as er
from . import rewards as rw
from .corpus import DEFAULT_TOP_K, Document, TfIdfIndex
from .erasure import ErasureConfig, ErasureController, ErasureEvent, ErasureKind
from .metrics import EvalReport, evaluate_run
from .protocol import JsonLineClient, MalformedResponse, TransportError
from .rewards import RewardAnnotation, RewardEngine, RewardKind
from .trace import (TAG_RE, Round, SegmentKind, Span, Trace, anchor_positions, format_information,
                    format_segment, mask_spans, serialize_trace)

log = logging.getLogger(__name__)


class PolicyStage(str, enum.Enum):
    OBSERVATION = "observation"
    SUB_ANSWER = "sub_answer"
    SEARCH = "search"
    ANSWER_OR_SEARCH = "answer_or_search"


class Termination(str, enum.Enum):
    ANSWER = "answer"
    ROUND_CAP = "round_cap"


class PolicyTransportError(RuntimeError):
    """The policy could not be reached; the episode is aborted."""


@dataclass(frozen=True)
class GenerationRequest:
    stage: PolicyStage
    context: str
    round: int
    attempt: int
    episode_nonce: str = ""


class Policy(Protocol):
    def generate(self, request: GenerationRequest) -> str: ...


Retriever = Callable[[str, int], Sequence[Document]]


@dataclass(frozen=True)
class QAExample:
    id: str
    question: str
    golden_answers: tuple[str, ...]
    sub_answers: tuple[str, ...] = ()
    evidence: tuple[Document, ...] = ()

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError(f"example {self.id!r}: empty question")
        if not self.golden_answers or not any(a.strip() for a in self.golden_answers):
            raise ValueError(f"example {self.id!r}: empty gold answer")

    @classmethod
    def from_record(cls, rec: Mapping) -> "QAExample":
        answers = rec.get("golden_answers", rec.get("answer"))
        if isinstance(answers, str):
            answers = [answers]
        evidence = []
        for ev in rec.get("evidence", ()):
            if isinstance(ev, str):
                evidence.append(Document.from_text(ev))
            elif "id" in ev:
                evidence.append(Document.from_record(ev))
            else:
                evidence.append(Document.from_text(ev["text"], ev.get("title", "")))
        return cls(str(rec["id"]), rec["question"], tuple(answers or ()),
                   tuple(rec.get("sub_answers", ())), tuple(evidence))

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "golden_answers": list(self.golden_answers),
            "sub_answers": list(self.sub_answers),
            "evidence": [{"title": d.title, "text": d.text} for d in self.evidence],
        }


@dataclass(frozen=True)
class EngineConfig:
    top_k: int = DEFAULT_TOP_K
    max_rounds: int = 8
    erasure: ErasureConfig = field(default_factory=ErasureConfig)

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass(frozen=True)
class AttemptRecord:
    round: int
    stage: PolicyStage
    attempt: int
    text: str
    reward: Optional[float] = None
    kept: bool = True
    malformed: bool = False

    def to_record(self) -> dict:
        return {"round": self.round, "stage": self.stage.value, "attempt": self.attempt,
                "text": self.text, "reward": self.reward, "kept": self.kept,
                "malformed": self.malformed}


@dataclass
class Episode:
    example_id: str
    trace: Trace
    annotations: list[RewardAnnotation]
    mask_spans: list[Span]
    erasure_events: list[ErasureEvent]
    attempt_log: list[AttemptRecord]
    total_reward: float
    terminated_by: Termination

    @property
    def final_answer(self) -> Optional[str]:
        return self.trace.final_answer

    @property
    def kept_annotations(self) -> list[RewardAnnotation]:
        return [a for a in self.annotations if a.attempt == 0]

    def to_record(self) -> dict:
        return {
            "id": self.example_id,
            "question": self.trace.question,
            "raw_text": serialize_trace(self.trace),
            "final_answer": self.trace.final_answer,
            "annotations": [a.to_record() for a in self.annotations],
            "mask_spans": [[s.start, s.end] for s in self.mask_spans],
            "erasure_events": [e.to_record() for e in self.erasure_events],
            "attempt_log": [a.to_record() for a in self.attempt_log],
            "total_reward": self.total_reward,
            "terminated_by": self.terminated_by.value,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), ensure_ascii=False, sort_keys=True)


@dataclass
class EpisodeFailure:
    example_id: str
    error: str

    def to_record(self) -> dict:
        return {"id": self.example_id, "error": self.error}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), ensure_ascii=False, sort_keys=True)


# -- policies ----------------------------------------------------------------

Alternative = Union[str, Callable[[str], str]]


class ScriptedPolicy:
    """Deterministic policy from a ``(round, stage) -> [alternatives]`` table.

    Attempt ``i`` at a slot returns alternative ``i``; once the list runs out the
    last alternative repeats. An alternative may be a callable of the context.
    """

    def __init__(self, script: Mapping[tuple[int, PolicyStage], Sequence[Alternative]]):
        self.script = {(int(r), PolicyStage(s)): list(alts) for (r, s), alts in script.items()}
        for slot, alts in self.script.items():
            if not alts:
                raise ValueError(f"empty alternatives for slot {slot}")

    def generate(self, request: GenerationRequest) -> str:
        slot = (request.round, request.stage)
        alts = self.script.get(slot)
        if alts is None:
            raise KeyError(f"script has no entry for round {slot[0]} stage {slot[1].value}")
        alt = alts[min(request.attempt, len(alts) - 1)]
        return alt(request.context) if callable(alt) else alt

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "ScriptedPolicy":
        return cls({(rec["round"], rec["stage"]): rec["alternatives"] for rec in records})


def scripted_policy(script: Mapping[tuple[int, PolicyStage], Sequence[Alternative]]) -> ScriptedPolicy:
    return ScriptedPolicy(script)


class ExternalPolicy:
    """Policy served over the line-delimited JSON protocol."""

    def __init__(self, endpoint: str | JsonLineClient, timeout: float = 30.0, retries: int = 1):
        self.client = endpoint if isinstance(endpoint, JsonLineClient) else JsonLineClient(endpoint, timeout, retries)

    def generate(self, request: GenerationRequest) -> str:
        try:
            resp = self.client.request({
                "kind": "generate", "stage": request.stage.value, "context": request.context,
                "round": request.round, "attempt": request.attempt,
                "episode_nonce": request.episode_nonce,
            })
        except TransportError as exc:
            raise PolicyTransportError(str(exc)) from exc
        except MalformedResponse:
            return ""
        text = resp.get("text")
        return text if isinstance(text, str) else ""


def external_policy(endpoint: str, timeout: float = 30.0, retries: int = 1) -> ExternalPolicy:
    return ExternalPolicy(endpoint, timeout, retries)


class IndexRetriever:
    def __init__(self, index: TfIdfIndex):
        self.index = index

    def __call__(self, query: str, k: int) -> list[Document]:
        return [d for d, _ in self.index.retrieve(query, k)]


class ExternalRetriever:
    def __init__(self, endpoint: str | JsonLineClient, timeout: float = 30.0, retries: int = 1):
        self.client = endpoint if isinstance(endpoint, JsonLineClient) else JsonLineClient(endpoint, timeout, retries)

    def __call__(self, query: str, k: int) -> list[Document]:
        resp = self.client.request({"kind": "retrieve", "query": query, "k": k,
                                    "attempt": 0, "episode_nonce": ""})
        return [Document.from_record(d) for d in resp.get("documents", [])][:k]


# -- episode loop ------------------------------------------------------------

_STAGE_TAG = {
    PolicyStage.SEARCH: SegmentKind.SEARCH,
    PolicyStage.OBSERVATION: SegmentKind.OBSERVATION,
    PolicyStage.SUB_ANSWER: SegmentKind.SUB_ANSWER,
}


def parse_generation(stage: PolicyStage, text: str) -> Optional[tuple[SegmentKind, str, str]]:
    """``(kind, content, prefix)`` from raw policy output, or None if malformed.

    Output may be bare content or a single tagged segment optionally preceded by
    prose. The answer-or-search stage requires an explicit tag.
    """
    tags = list(TAG_RE.finditer(text))
    if not tags:
        if stage is PolicyStage.ANSWER_OR_SEARCH or not text.strip():
            return None
        return _STAGE_TAG[stage], text.strip(), "\n"
    if len(tags) != 2 or tags[0].group(1) or not tags[1].group(1) or tags[0].group(2) != tags[1].group(2):
        return None
    kind = SegmentKind(tags[0].group(2))
    allowed = ({SegmentKind.ANSWER, SegmentKind.SEARCH} if stage is PolicyStage.ANSWER_OR_SEARCH
               else {_STAGE_TAG[stage]})
    content = text[tags[0].end():tags[1].start()]
    if kind not in allowed or not content.strip() or text[tags[1].end():].strip():
        return None
    prose = text[:tags[0].start()].strip()
    return kind, content, "\n" + prose + " " if prose else "\n"


class _EpisodeRun:
    def __init__(self, example: QAExample, policy: Policy, config: EngineConfig,
                 index: TfIdfIndex, retriever: Retriever, nonce: str):
        self.example = example
        self.policy = policy
        self.config = config
        self.retriever = retriever
        self.nonce = nonce
        gold = rw.GoldTargets.build(index, example.evidence, example.sub_answers, example.golden_answers)
        self.engine = RewardEngine(gold, index, max_depth=config.max_rounds)
        self.controller = ErasureController(config.erasure)
        self.trace = Trace(example.question)
        self.state = self.engine.init_state()
        self.kept: list[tuple[int, RewardKind, float]] = []
        self.erased: list[RewardAnnotation] = []
        self.attempts: list[AttemptRecord] = []
        self.slot_counts: dict[tuple[int, PolicyStage], int] = {}

    def _call(self, rnd: int, stage: PolicyStage, context: str) -> tuple[str, int]:
        attempt = self.slot_counts.get((rnd, stage), 0)
        self.slot_counts[(rnd, stage)] = attempt + 1
        req = GenerationRequest(stage, context, rnd, attempt, self.nonce)
        try:
            return self.policy.generate(req), attempt
        except (TransportError, PolicyTransportError) as exc:
            raise PolicyTransportError(f"round {rnd} {stage.value}: {exc}") from exc

    def _segment(self, rnd: int, stage: PolicyStage, context: str,
                 budget: ErasureKind) -> tuple[SegmentKind, str, str, int, str]:
        """Generate until well-formed or the budget is spent; malformed tries are logged."""
        while True:
            text, attempt = self._call(rnd, stage, context)
            parsed = parse_generation(stage, text)
            if parsed is not None:
                return (*parsed, attempt, text)
            self.attempts.append(AttemptRecord(rnd, stage, attempt, text, None, False, True))
            if not self.controller.charge(budget, rnd):
                if stage is PolicyStage.ANSWER_OR_SEARCH:
                    return SegmentKind.ANSWER, "", "\n", attempt, text
                return _STAGE_TAG[stage], "", "\n", attempt, text

    def _erase(self, trace_after: Trace, state_after: rw.RewardState, decision: er.ErasureDecision,
               rnd: int, kind: RewardKind, value: float) -> None:
        anchor = anchor_positions(trace_after)[(rnd, rw._ANCHOR_KIND[kind])]
        self.erased.append(RewardAnnotation(rnd, kind, value, anchor,
                                            self.controller.spent(decision.kind, rnd),
                                            note=decision.kind.value))
        self.trace, self.state = er.apply(trace_after, decision, state_after)

    def _search(self, rnd: int, stage: PolicyStage, query: str, prefix: str,
                attempt: int, text: str) -> bool:
        """Retrieve, score, and keep or erase. True if the search was kept."""
        docs = list(self.retriever(query, self.config.top_k))
        score, state_after = self.engine.search_reward(rw.snapshot(self.state), docs)
        seg = {"query": query, "information": format_information(docs)}
        if rnd == 1:
            trace_after = self.trace.with_round(Round(**seg, prefixes={SegmentKind.SEARCH: prefix}))
        else:
            last = self.trace.rounds[-1]
            trace_after = self.trace.replace_last(
                replace(last, **seg, prefixes={**last.prefixes, SegmentKind.SEARCH: prefix}))
        decision = self.controller.decide(rnd, er.Stage.AFTER_SEARCH, score.reward)
        self.attempts.append(AttemptRecord(rnd, stage, attempt, text, score.reward, not decision.fires))
        if decision.fires:
            self._erase(trace_after, state_after, decision, rnd, RewardKind.SEARCH, score.reward)
            return False
        self.trace, self.state = trace_after, rw.commit(state_after)
        self.kept.append((rnd, RewardKind.SEARCH, score.reward))
        return True

    def _observe(self, rnd: int) -> None:
        while True:
            state_o = rw.snapshot(self.state)
            ctx = serialize_trace(self.trace)
            _, obs, p_obs, a_obs, t_obs = self._segment(rnd, PolicyStage.OBSERVATION, ctx,
                                                        ErasureKind.ERASE_SUB_ANSWER)
            ctx2 = ctx + format_segment(SegmentKind.OBSERVATION, obs, p_obs)
            _, sub, p_sub, a_sub, t_sub = self._segment(rnd, PolicyStage.SUB_ANSWER, ctx2,
                                                        ErasureKind.ERASE_SUB_ANSWER)
            value, state_after = self.engine.sub_answer_reward(state_o, sub)
            trace_after = self.trace.with_round(Round(
                observation=obs, sub_answer=sub,
                prefixes={SegmentKind.OBSERVATION: p_obs, SegmentKind.SUB_ANSWER: p_sub}))
            decision = self.controller.decide(rnd, er.Stage.AFTER_SUB_ANSWER, value)
            self.attempts.append(AttemptRecord(rnd, PolicyStage.OBSERVATION, a_obs, t_obs, None,
                                               not decision.fires))
            self.attempts.append(AttemptRecord(rnd, PolicyStage.SUB_ANSWER, a_sub, t_sub, value,
                                               not decision.fires))
            if decision.fires:
                self._erase(trace_after, state_after, decision, rnd, RewardKind.SUB_ANSWER, value)
                continue
            self.trace, self.state = trace_after, rw.commit(state_after)
            self.kept.append((rnd, RewardKind.SUB_ANSWER, value))
            return

    def run(self) -> Episode:
        rnd = 1
        self.state = rw.begin_round(self.state)
        while True:
            ctx = serialize_trace(self.trace)
            _, query, prefix, attempt, text = self._segment(1, PolicyStage.SEARCH, ctx,
                                                            ErasureKind.ERASE_PLAN)
            if self._search(1, PolicyStage.SEARCH, query, prefix, attempt, text):
                break
        termination = Termination.ROUND_CAP
        while rnd < self.config.max_rounds:
            rnd += 1
            self.state = rw.begin_round(self.state)
            self._observe(rnd)
            answered = False
            while True:
                ctx = serialize_trace(self.trace)
                kind, content, prefix, attempt, text = self._segment(
                    rnd, PolicyStage.ANSWER_OR_SEARCH, ctx, ErasureKind.ERASE_SEARCH)
                if kind is SegmentKind.ANSWER:
                    self.trace = replace(self.trace, final_answer=content, answer_prefix=prefix)
                    value = self.engine.final_reward(content)
                    self.attempts.append(AttemptRecord(rnd, PolicyStage.ANSWER_OR_SEARCH, attempt, text, value))
                    self.kept.append((rnd, RewardKind.ANSWER, value))
                    answered = True
                    break
                if self._search(rnd, PolicyStage.ANSWER_OR_SEARCH, content, prefix, attempt, text):
                    break
            if answered:
                termination = Termination.ANSWER
                break
        return self._finish(termination)

    def _finish(self, termination: Termination) -> Episode:
        kept = rw.attribute(self.trace, self.kept)
        return Episode(
            example_id=self.example.id,
            trace=self.trace,
            annotations=kept + self.erased,
            mask_spans=mask_spans(self.trace),
            erasure_events=list(self.controller.events),
            attempt_log=self.attempts,
            total_reward=sum(a.value for a in kept),
            terminated_by=termination,
        )


def run_episode(example: QAExample, policy: Policy, config: EngineConfig, index: TfIdfIndex,
                retriever: Optional[Retriever] = None, nonce: Optional[str] = None) -> Episode:
    """Roll out one example.

    ``index`` supplies the TF-IDF similarity used by the search reward; it is also
    the retriever unless an external ``retriever`` is given.
    """
    retriever = retriever or IndexRetriever(index)
    return _EpisodeRun(example, policy, config, index, retriever,
                       nonce if nonce is not None else example.id).run()


PolicySource = Union[Policy, Callable[[QAExample], Policy]]


def _policy_for(source: PolicySource, example: QAExample) -> Policy:
    return source if hasattr(source, "generate") else source(example)


def run_dataset(dataset: Iterable[QAExample], policy: PolicySource, config: EngineConfig,
                index: TfIdfIndex, retriever: Optional[Retriever] = None,
                parallelism: int = 1) -> Iterator[Union[Episode, EpisodeFailure]]:
    """One episode (or failure record) per example, in input order.

    ``policy`` is either a shared policy or a factory called once per example.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    def one(example: QAExample) -> Union[Episode, EpisodeFailure]:
        try:
            return run_episode(example, _policy_for(policy, example), config, index, retriever)
        except Exception as exc:
            log.warning("episode %s failed: %s", example.id, exc)
            return EpisodeFailure(example.id, f"{type(exc).__name__}: {exc}")

    if parallelism == 1:
        for ex in dataset:
            yield one(ex)
        return
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        yield from pool.map(one, dataset)


def evaluate_episodes(episodes: Iterable[Episode], dataset: Iterable[QAExample]) -> EvalReport:
    golds = {ex.id: list(ex.golden_answers) for ex in dataset}
    return evaluate_run(((ep.example_id, ep.final_answer) for ep in episodes), golds)


# -- files -------------------------------------------------------------------


def read_dataset_jsonl(path: str | Path) -> Iterator[QAExample]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield QAExample.from_record(json.loads(line))
                except (KeyError, TypeError, json.JSONDecodeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad dataset record ({exc})") from None


def write_dataset_jsonl(examples: Iterable[QAExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def write_episodes_jsonl(episodes: Iterable[Union[Episode, EpisodeFailure]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(ep.to_json() + "\n")


def read_episode_answers(path: str | Path) -> list[tuple[str, Optional[str]]]:
    """``(id, final_answer)`` pairs from an episode file; failure records count as unanswered."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append((rec["id"], rec.get("final_answer")))
    return out


def write_annotations_jsonl(episodes: Iterable[Episode], path: str | Path) -> None:
    """Per-annotation records an external trainer can consume without this package."""
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            spans = [[s.start, s.end] for s in ep.mask_spans]
            for a in ep.annotations:
                rec = {"id": ep.example_id, **a.to_record(), "mask_spans": spans}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
