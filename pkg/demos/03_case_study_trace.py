"""Parse a published case-study trace and look at where each reward lands."""

from pathlib import Path

from erl.rewards import RewardKind, attribute
from erl.trace import mask_spans, parse_trace

text = (Path(__file__).parent.parent / "tests" / "fixtures" / "case_studies" / "tipper_gore.txt").read_text()
trace = parse_trace(text)

print(trace.question)
print("search rounds:", trace.search_count, " final answer:", trace.final_answer.strip())

for i, rnd in enumerate(trace.rounds, 1):
    print(f"round {i}: query={rnd.query!r} sub_answer={rnd.sub_answer!r}")

# token-level attribution: each reward sits on the closing tag of the action that earned it
rewards = [(1, RewardKind.SEARCH, 0.5), (2, RewardKind.SUB_ANSWER, 0.5), (2, RewardKind.SEARCH, 0.5),
           (3, RewardKind.SUB_ANSWER, 0.5), (3, RewardKind.ANSWER, 1.0)]
for ann in attribute(trace, rewards):
    start = max(ann.anchor - 30, 0)
    print(f"{ann.kind.value:10} round {ann.round}: ...{text[start:ann.anchor + 1]!r}")

# retrieved text is masked out of the policy-gradient loss
print("masked spans:", [(s.start, s.end) for s in mask_spans(trace)])
