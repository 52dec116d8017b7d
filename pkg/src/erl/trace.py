"""Tagged reasoning traces: parsing, validation, canonical serialization and spans.

A trace is the question on its first line followed by a body of tagged
segments. Round 1 is ``<search>`` + ``<information>``; every later round is
``<observation>`` + ``<sub_answer>`` followed either by another search or by the
final ``<answer>``. Free prose between tags is kept verbatim as the prefix of
the segment that follows it.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional

from .corpus import Document

DEFAULT_PREFIX = "\n"


class SegmentKind(str, enum.Enum):
    SEARCH = "search"
    INFORMATION = "information"
    OBSERVATION = "observation"
    SUB_ANSWER = "sub_answer"
    ANSWER = "answer"

    @property
    def open_tag(self) -> str:
        return f"<{self.value}>"

    @property
    def close_tag(self) -> str:
        return f"</{self.value}>"


TAG_RE = re.compile(r"<(/?)(search|information|observation|sub_answer|answer)>")
DOC_MARKER_RE = re.compile(r"Doc (\d+)<## Title: (.*?) ##>")


class TraceSyntaxError(ValueError):
    """Parse failure with the character position and the violated rule."""

    def __init__(self, message: str, position: int, rule: str):
        super().__init__(f"{message} (at char {position}, rule {rule})")
        self.position = position
        self.rule = rule


class TraceInvariantError(ValueError):
    """A trace object that cannot be serialized because it violates a trace invariant."""

    def __init__(self, rule: str, detail: str = ""):
        super().__init__(f"{rule}: {detail}" if detail else rule)
        self.rule = rule


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    maskable: bool = False

    def __len__(self) -> int:
        return self.end - self.start


def _norm_prefixes(prefixes: Mapping) -> dict:
    return {SegmentKind(k): v for k, v in prefixes.items() if v != DEFAULT_PREFIX}


@dataclass(frozen=True)
class Round:
    """One reasoning round. ``information`` holds the raw evidence block text."""

    observation: Optional[str] = None
    sub_answer: Optional[str] = None
    query: Optional[str] = None
    information: Optional[str] = None
    prefixes: Mapping[SegmentKind, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "prefixes", _norm_prefixes(self.prefixes))

    def prefix(self, kind: SegmentKind) -> str:
        return self.prefixes.get(kind, DEFAULT_PREFIX)

    @property
    def evidence(self) -> Optional[list[Document]]:
        if self.information is None:
            return None
        return parse_information(self.information)

    def segments(self) -> Iterator[tuple[SegmentKind, str]]:
        for kind, content in (
            (SegmentKind.OBSERVATION, self.observation),
            (SegmentKind.SUB_ANSWER, self.sub_answer),
            (SegmentKind.SEARCH, self.query),
            (SegmentKind.INFORMATION, self.information),
        ):
            if content is not None:
                yield kind, content


@dataclass(frozen=True)
class Trace:
    question: str
    rounds: tuple[Round, ...] = ()
    final_answer: Optional[str] = None
    answer_prefix: str = DEFAULT_PREFIX
    trailing: str = ""

    def __post_init__(self):
        object.__setattr__(self, "rounds", tuple(self.rounds))

    @property
    def raw_text(self) -> str:
        return serialize_trace(self)

    @property
    def search_count(self) -> int:
        return sum(1 for r in self.rounds if r.query is not None)

    def answer_round(self) -> int:
        """Round number the final answer is attributed to."""
        if not self.rounds:
            return 1
        last = self.rounds[-1]
        return len(self.rounds) + 1 if last.query is not None else len(self.rounds)

    def with_round(self, rnd: Round) -> "Trace":
        return replace(self, rounds=self.rounds + (rnd,))

    def replace_last(self, rnd: Round) -> "Trace":
        return replace(self, rounds=self.rounds[:-1] + (rnd,))

    def truncated(self, n_rounds: int) -> "Trace":
        """The first ``n_rounds`` rounds, with no answer and no trailing prose."""
        return Trace(self.question, self.rounds[:n_rounds])


@dataclass(frozen=True)
class SegmentLayout:
    round: int
    kind: SegmentKind
    start: int          # index of '<' of the opening tag
    content_start: int
    content_end: int
    end: int            # one past the closing tag's '>'


# -- information blocks ------------------------------------------------------


def format_information(docs: Iterable[Document]) -> str:
    """Render retrieved documents with ``Doc N<## Title: "..." ##>`` markers."""
    lines = [f'Doc {i}<## Title: "{d.title}" ##> {d.text}' for i, d in enumerate(docs, 1)]
    if not lines:
        return " "
    return " " + "\n".join(lines) + " "


def parse_information(content: str) -> list[Document]:
    markers = list(DOC_MARKER_RE.finditer(content))
    if not markers:
        text = content.strip()
        return [Document.from_text(text)] if text else []
    docs = []
    for i, m in enumerate(markers):
        end = markers[i + 1].start() if i + 1 < len(markers) else len(content)
        title = m.group(2).strip()
        if len(title) >= 2 and title[0] == title[-1] == '"':
            title = title[1:-1]
        docs.append(Document.from_text(content[m.end():end].strip(), title))
    return docs


def format_segment(kind: SegmentKind, content: str, prefix: str = DEFAULT_PREFIX) -> str:
    return f"{prefix}{kind.open_tag}{content}{kind.close_tag}"


# -- parsing -----------------------------------------------------------------


def _scan(text: str, offset: int) -> Iterator[tuple[SegmentKind, str, str, int]]:
    """Yield ``(kind, prefix, content, open_pos)`` for each segment, then a trailing sentinel."""
    pos = offset
    while True:
        m = TAG_RE.search(text, pos)
        if m is None:
            yield None, text[pos:], "", len(text)
            return
        if m.group(1):
            raise TraceSyntaxError(f"closing tag {m.group(0)} without an opening tag",
                                   m.start(), "unmatched-close")
        kind = SegmentKind(m.group(2))
        close = TAG_RE.search(text, m.end())
        if close is None:
            raise TraceSyntaxError(f"unclosed tag {kind.open_tag}", m.start(), "unclosed-tag")
        if not close.group(1) or close.group(2) != kind.value:
            raise TraceSyntaxError(f"tag {close.group(0)} inside {kind.open_tag}",
                                   close.start(), "nested-tag")
        yield kind, text[pos:m.start()], text[m.end():close.start()], m.start()
        pos = close.end()


def _split_question(text: str) -> tuple[str, int]:
    nl = text.find("\n")
    first = text if nl < 0 else text[:nl]
    if TAG_RE.search(first):
        return "", 0
    return first, len(first)


def parse_trace(text: str) -> Trace:
    """Parse tagged trace text.

    Raises :class:`TraceSyntaxError` for unclosed or nested tags, stray closing
    tags, tags after the final answer, and segments out of round order.
    """
    question, offset = _split_question(text)
    rounds: list[dict] = []
    answer: Optional[str] = None
    answer_prefix = DEFAULT_PREFIX
    trailing = ""

    def fail(msg: str, pos: int, rule: str):
        raise TraceSyntaxError(msg, pos, rule)

    for kind, prefix, content, pos in _scan(text, offset):
        if kind is None:
            trailing = prefix
            break
        if answer is not None:
            fail("content after final answer", pos, "content-after-answer")
        cur = rounds[-1] if rounds else None
        if kind is SegmentKind.SEARCH:
            if cur is None:
                cur = {"prefixes": {}, "seen": set()}
                rounds.append(cur)
            elif SegmentKind.OBSERVATION not in cur["seen"] or SegmentKind.SEARCH in cur["seen"]:
                fail("search must follow an observation and sub-answer", pos, "search-order")
            elif SegmentKind.SUB_ANSWER not in cur["seen"]:
                fail("search before sub-answer", pos, "search-order")
            cur["query"] = content
            cur["seen"].add(kind)
            cur["prefixes"][kind] = prefix
        elif kind is SegmentKind.INFORMATION:
            if cur is None or SegmentKind.SEARCH not in cur["seen"] or SegmentKind.INFORMATION in cur["seen"]:
                fail("information block without a preceding search", pos, "information-order")
            cur["information"] = content
            cur["seen"].add(kind)
            cur["prefixes"][kind] = prefix
        elif kind is SegmentKind.OBSERVATION:
            if cur is None:
                fail("the first round cannot contain an observation", pos, "first-round-search-only")
            if SegmentKind.SEARCH in cur["seen"] and SegmentKind.INFORMATION not in cur["seen"]:
                fail("observation before the search results", pos, "missing-information")
            if SegmentKind.SEARCH not in cur["seen"]:
                fail("observation before the previous round searched", pos, "observation-order")
            rounds.append({"observation": content, "seen": {kind}, "prefixes": {kind: prefix}})
        elif kind is SegmentKind.SUB_ANSWER:
            if cur is None or SegmentKind.OBSERVATION not in cur["seen"] or SegmentKind.SUB_ANSWER in cur["seen"]:
                fail("sub-answer must directly follow an observation", pos, "sub-answer-order")
            cur["sub_answer"] = content
            cur["seen"].add(kind)
            cur["prefixes"][kind] = prefix
        else:  # ANSWER
            if cur is not None:
                if SegmentKind.OBSERVATION in cur["seen"] and SegmentKind.SUB_ANSWER not in cur["seen"]:
                    fail("answer after an observation without sub-answer", pos, "answer-order")
                if SegmentKind.SEARCH in cur["seen"] and SegmentKind.INFORMATION not in cur["seen"]:
                    fail("answer while a search is pending", pos, "missing-information")
            answer = content
            answer_prefix = prefix

    if rounds and SegmentKind.OBSERVATION in rounds[-1]["seen"] and SegmentKind.SUB_ANSWER not in rounds[-1]["seen"]:
        fail("observation without sub-answer", len(text), "observation-without-sub-answer")
    for r in rounds[:-1]:
        if SegmentKind.SEARCH in r["seen"] and SegmentKind.INFORMATION not in r["seen"]:
            fail("search without information", len(text), "missing-information")

    built = tuple(
        Round(r.get("observation"), r.get("sub_answer"), r.get("query"), r.get("information"),
              r["prefixes"])
        for r in rounds
    )
    return Trace(question, built, answer, answer_prefix, trailing)


# -- validation / serialization ---------------------------------------------


def _check_text(rule: str, value: str) -> None:
    m = TAG_RE.search(value)
    if m:
        raise TraceInvariantError(rule, f"contains tag {m.group(0)}")


def validate_trace(trace: Trace) -> None:
    """Raise :class:`TraceInvariantError` naming the first violated invariant."""
    if "\n" in trace.question:
        raise TraceInvariantError("question-single-line")
    _check_text("question-without-tags", trace.question)
    n = len(trace.rounds)
    for i, rnd in enumerate(trace.rounds, 1):
        if (rnd.observation is None) != (rnd.sub_answer is None):
            raise TraceInvariantError("observation-iff-sub-answer", f"round {i}")
        if i == 1:
            if rnd.observation is not None:
                raise TraceInvariantError("first-round-search-only")
            if rnd.query is None:
                raise TraceInvariantError("first-round-needs-search")
        elif rnd.observation is None:
            raise TraceInvariantError("later-round-needs-observation", f"round {i}")
        if rnd.information is not None and rnd.query is None:
            raise TraceInvariantError("information-needs-search", f"round {i}")
        if rnd.query is not None and rnd.information is None and (i < n or trace.final_answer is not None):
            raise TraceInvariantError("search-needs-information", f"round {i}")
        for kind, content in rnd.segments():
            _check_text(f"{kind.value}-without-tags", content)
        for kind in SegmentKind:
            _check_text("prose-without-tags", rnd.prefix(kind))
    if trace.final_answer is not None:
        _check_text("answer-without-tags", trace.final_answer)
        _check_text("prose-without-tags", trace.answer_prefix)
    _check_text("prose-without-tags", trace.trailing)


def layout(trace: Trace) -> tuple[str, list[SegmentLayout]]:
    """Canonical text plus the position of every segment in it."""
    parts = [trace.question]
    pos = len(trace.question)
    segs: list[SegmentLayout] = []

    def emit(rnd_no: int, kind: SegmentKind, content: str, prefix: str):
        nonlocal pos
        start = pos + len(prefix)
        cstart = start + len(kind.open_tag)
        cend = cstart + len(content)
        end = cend + len(kind.close_tag)
        parts.append(prefix + kind.open_tag + content + kind.close_tag)
        segs.append(SegmentLayout(rnd_no, kind, start, cstart, cend, end))
        pos = end

    for i, rnd in enumerate(trace.rounds, 1):
        for kind, content in rnd.segments():
            emit(i, kind, content, rnd.prefix(kind))
    if trace.final_answer is not None:
        emit(trace.answer_round(), SegmentKind.ANSWER, trace.final_answer, trace.answer_prefix)
    parts.append(trace.trailing)
    return "".join(parts), segs


def serialize_trace(trace: Trace) -> str:
    """Canonical text of ``trace``; ``parse_trace`` of the result equals ``trace``."""
    validate_trace(trace)
    text, _ = layout(trace)
    body = text[len(trace.question):]
    if trace.question and body and not body.startswith("\n"):
        raise TraceInvariantError("question-line-terminated",
                                  "text after the question must start on a new line")
    if not trace.question and body:
        first = body.split("\n", 1)[0]
        if first and not TAG_RE.search(first):
            raise TraceInvariantError("question-line-terminated",
                                      "leading prose would be read back as the question")
    return text


def mask_spans(trace: Trace) -> list[Span]:
    """Interior of every non-empty ``<information>`` block (retrieved text)."""
    _, segs = layout(trace)
    return [Span(s.content_start, s.content_end, True)
            for s in segs if s.kind is SegmentKind.INFORMATION and s.content_end > s.content_start]


ANCHORED_KINDS = (SegmentKind.SEARCH, SegmentKind.OBSERVATION, SegmentKind.SUB_ANSWER, SegmentKind.ANSWER)


def anchor_positions(trace: Trace) -> dict[tuple[int, SegmentKind], int]:
    """Offset of the last character (``>``) of each reward-bearing closing tag."""
    _, segs = layout(trace)
    return {(s.round, s.kind): s.end - 1 for s in segs if s.kind in ANCHORED_KINDS}


def segment_layout(trace: Trace) -> list[SegmentLayout]:
    return layout(trace)[1]


# -- trace files -------------------------------------------------------------


def read_traces_jsonl(path: str | Path) -> Iterator[Trace]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            trace = parse_trace(rec["raw_text"])
            if rec.get("question", trace.question) != trace.question:
                raise ValueError(f"{path}:{lineno}: question field does not match raw_text")
            yield trace


def write_traces_jsonl(traces: Iterable[Trace], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            rec = {"question": t.question, "raw_text": serialize_trace(t)}
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
