"""A scripted episode that makes two mistakes and gets to take them back."""

from erl.corpus import Document, build_index
from erl.erasure import ErasureConfig
from erl.rollout import EngineConfig, PolicyStage as S, QAExample, ScriptedPolicy, run_episode
from erl.trace import serialize_trace

corpus = [
    Document("d1", "Xavi", "Xavi was born in Lumbria"),
    Document("d2", "Lumbria", "The capital of Lumbria is Portal"),
    Document("d4", "Weather", "Sunny weather report today"),
    Document("d5", "Music", "A song about rivers"),
]
index = build_index(corpus)
example = QAExample("ex1", "What is the capital of the place where Xavi was born?", ("Portal",),
                    ("Lumbria", "Portal"), tuple(corpus[:2]))

# each slot lists what the policy says on attempt 0, 1, ...
policy = ScriptedPolicy({
    (1, S.SEARCH): ["Xavi born"],
    (2, S.OBSERVATION): ["Xavi was born in Lumbria."],
    (2, S.SUB_ANSWER): ["Rivers", "Lumbria"],                      # first try is wrong
    (2, S.ANSWER_OR_SEARCH): ["<search>sunny weather</search>",    # so is this query
                              "<search>capital of Lumbria</search>"],
    (3, S.OBSERVATION): ["The capital is Portal."],
    (3, S.SUB_ANSWER): ["Portal"],
    (3, S.ANSWER_OR_SEARCH): ["<answer>Portal</answer>"],
})

episode = run_episode(example, policy, EngineConfig(top_k=1), index)

print("erasure events")
for event in episode.erasure_events:
    print("  ", event.to_record())

print("\nevery attempt, kept or not")
for a in episode.attempt_log:
    print(f"   round {a.round} {a.stage.value:17} attempt {a.attempt} kept={a.kept!s:5} {a.text!r}")

print("\nthe kept trajectory\n")
print(serialize_trace(episode.trace))
print("\ntotal reward", episode.total_reward)

# the same script with erasure switched off keeps both mistakes
plain = run_episode(example, policy, EngineConfig(top_k=1, erasure=ErasureConfig(enabled=False)), index)
print("without erasure:", plain.total_reward, "answer", plain.final_answer)
