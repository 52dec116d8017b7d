import json

import pytest

from erl.corpus import Document, build_index
from erl.erasure import ErasureConfig, ErasureKind
from erl.rewards import RewardKind
from erl.rollout import (EngineConfig, Episode, EpisodeFailure, GenerationRequest, PolicyStage, QAExample,
                         ScriptedPolicy, Termination, evaluate_episodes, parse_generation, read_dataset_jsonl,
                         run_dataset, run_episode, write_dataset_jsonl)
from erl.trace import SegmentKind, parse_trace, serialize_trace

import oracles

S = PolicyStage
CORPUS = [
    Document("d1", "Xavi", "Xavi was born in Lumbria"),
    Document("d2", "Lumbria", "The capital of Lumbria is Portal"),
    Document("d3", "Portal", "Portal is a harbour city"),
    Document("d4", "Weather", "Sunny weather report today"),
    Document("d5", "Music", "A song about rivers"),
]
INDEX = build_index(CORPUS)
EXAMPLE = QAExample("ex1", "What is the capital of the place where Xavi was born?", ("Portal",),
                    ("Lumbria", "Portal"), (CORPUS[0], CORPUS[1]))
CFG = EngineConfig(top_k=1)

PERFECT = {
    (1, S.SEARCH): ["Xavi born"],
    (2, S.OBSERVATION): ["Xavi was born in Lumbria."],
    (2, S.SUB_ANSWER): ["Lumbria"],
    (2, S.ANSWER_OR_SEARCH): ["<search>capital of Lumbria</search>"],
    (3, S.OBSERVATION): ["The capital is Portal."],
    (3, S.SUB_ANSWER): ["Portal"],
    (3, S.ANSWER_OR_SEARCH): ["<answer>Portal</answer>"],
}


def script(**overrides):
    s = dict(PERFECT)
    for key, alts in overrides.items():
        rnd, stage = key.split("_", 1)
        s[(int(rnd[1:]), S(stage))] = alts
    return ScriptedPolicy(s)


def check_invariants(ep: Episode):
    text = serialize_trace(ep.trace)
    t = parse_trace(text)
    assert t == ep.trace
    assert ep.total_reward == pytest.approx(sum(a.value for a in ep.kept_annotations), abs=1e-12)
    assert (ep.terminated_by is Termination.ANSWER) == (ep.trace.final_answer is not None)
    assert len(ep.mask_spans) == t.search_count
    assert t.rounds[0].observation is None
    # every fired erasure is followed by a regeneration in the same round
    for e in ep.erasure_events:
        if e.decision.fires:
            later = [a for a in ep.attempt_log if a.round == e.round and a.kept]
            assert later or e.decision.kind is ErasureKind.ERASE_PLAN
    json.loads(ep.to_json())


def test_perfect_two_hop_matches_hand_stepped_oracle():
    ep = run_episode(EXAMPLE, script(), CFG, INDEX)
    check_invariants(ep)
    assert ep.erasure_events == []
    dense = oracles.DenseTfIdf([d.text for d in CORPUS])
    gold = [d.text for d in EXAMPLE.evidence]
    # hand-stepped: each query retrieves its single best document
    r1 = [CORPUS[0]]
    r2 = [CORPUS[1]]
    assert [i for _, i in dense.ranking(CORPUS, "Xavi born")][:1] == ["d1"]
    assert [i for _, i in dense.ranking(CORPUS, "capital of Lumbria")][:1] == ["d2"]
    s1, s2 = oracles.search_rewards(dense, gold, [r1, r2])
    u2, u3 = oracles.sub_answer_rewards(["Lumbria", "Portal"], ["Lumbria", "Portal"])
    ans = oracles.answer_reward("Portal", ["Portal"])
    assert ep.total_reward == pytest.approx(s1 + u2 + s2 + u3 + ans, abs=1e-9)
    by = {(a.round, a.kind): a.value for a in ep.kept_annotations}
    assert by[(1, RewardKind.SEARCH)] == pytest.approx(s1, abs=1e-9)
    assert by[(2, RewardKind.SEARCH)] == pytest.approx(s2, abs=1e-9)
    assert by[(3, RewardKind.ANSWER)] == 1.0
    assert 0 < s2 < 0.5        # d2 shares "Lumbria" with the already-covered d1
    assert ep.terminated_by is Termination.ANSWER and ep.final_answer == "Portal"


def test_plan_erasure_then_second_branch_succeeds():
    ep = run_episode(EXAMPLE, script(r1_search=["sunny weather", "Xavi born"]), CFG, INDEX)
    check_invariants(ep)
    fired = [e for e in ep.erasure_events if e.decision.fires]
    assert [e.decision.kind for e in fired] == [ErasureKind.ERASE_PLAN]
    assert fired[0].decision.trigger_value == 0.0
    assert "sunny" not in serialize_trace(ep.trace)
    erased = [a for a in ep.annotations if a.attempt > 0]
    assert len(erased) == 1 and erased[0].note == "erase_plan"
    assert ep.final_answer == "Portal"
    clean = run_episode(EXAMPLE, script(), CFG, INDEX)
    assert ep.total_reward == pytest.approx(clean.total_reward)
    assert serialize_trace(ep.trace) == serialize_trace(clean.trace)


def test_bad_then_good_search_erases_once():
    ep = run_episode(EXAMPLE, script(r2_answer_or_search=["<search>Xavi born</search>",
                                                          "<search>capital of Lumbria</search>"]), CFG, INDEX)
    check_invariants(ep)
    assert [e.decision.kind for e in ep.erasure_events] == [ErasureKind.ERASE_SEARCH]
    assert ep.final_answer == "Portal"


def test_bad_sub_answer_is_regenerated():
    ep = run_episode(EXAMPLE, script(r2_sub_answer=["Xavi", "Lumbria"]), CFG, INDEX)
    check_invariants(ep)
    assert [e.decision.kind for e in ep.erasure_events] == [ErasureKind.ERASE_SUB_ANSWER]
    assert ep.trace.rounds[1].sub_answer == "Lumbria"


def test_noop_thresholds_equal_disabled():
    bad = dict(r1_search=["sunny weather", "Xavi born"], r2_sub_answer=["Xavi", "Lumbria"])
    noop = EngineConfig(top_k=1, erasure=ErasureConfig(alpha=-2, beta_plan=-2))
    off = EngineConfig(top_k=1, erasure=ErasureConfig(enabled=False))
    a = run_episode(EXAMPLE, script(**bad), noop, INDEX)
    b = run_episode(EXAMPLE, script(**bad), off, INDEX)
    assert a.erasure_events == []
    assert a.to_json() == b.to_json()


def test_budget_exhaustion_keeps_last_attempt():
    cfg = EngineConfig(top_k=1, erasure=ErasureConfig(max_retries_plan=2))
    ep = run_episode(EXAMPLE, script(r1_search=["sunny weather"]), cfg, INDEX)
    check_invariants(ep)
    kinds = [(e.decision.kind, e.budget_exhausted) for e in ep.erasure_events]
    assert kinds == [(ErasureKind.ERASE_PLAN, False)] * 2 + [(ErasureKind.NONE, True)]
    assert ep.trace.rounds[0].query == "sunny weather"


def test_malformed_output_counts_against_budget():
    cfg = EngineConfig(top_k=1, erasure=ErasureConfig(max_retries_search=1))
    ep = run_episode(EXAMPLE, script(r2_answer_or_search=["no tags here"]), cfg, INDEX)
    check_invariants(ep)
    bad = [a for a in ep.attempt_log if a.malformed]
    assert len(bad) == 2
    assert ep.final_answer == "" and ep.terminated_by is Termination.ANSWER


def test_round_cap():
    s = script(r3_answer_or_search=["<search>Portal harbour</search>"])
    ep = run_episode(EXAMPLE, s, EngineConfig(top_k=1, max_rounds=3), INDEX)
    check_invariants(ep)
    assert ep.terminated_by is Termination.ROUND_CAP and ep.final_answer is None
    assert len(ep.trace.rounds) == 3


def test_stage_order_seen_by_policy():
    seen = []

    class Spy(ScriptedPolicy):
        def generate(self, request):
            seen.append((request.round, request.stage, request.episode_nonce))
            return super().generate(request)

    run_episode(EXAMPLE, Spy(PERFECT), CFG, INDEX, nonce="n-7")
    assert [(r, s) for r, s, _ in seen] == [
        (1, S.SEARCH), (2, S.OBSERVATION), (2, S.SUB_ANSWER), (2, S.ANSWER_OR_SEARCH),
        (3, S.OBSERVATION), (3, S.SUB_ANSWER), (3, S.ANSWER_OR_SEARCH)]
    assert {n for *_, n in seen} == {"n-7"}


def test_regeneration_context_is_truncated_prefix():
    contexts = []
    alts = [lambda ctx: contexts.append(ctx) or "<search>Xavi born</search>",
            lambda ctx: contexts.append(ctx) or "<search>capital of Lumbria</search>"]
    run_episode(EXAMPLE, script(r2_answer_or_search=alts), CFG, INDEX)
    assert contexts[0] == contexts[1]
    assert contexts[0].endswith("</sub_answer>")


def test_scripted_policy_errors_and_repeat():
    with pytest.raises(KeyError, match="round 1 stage search"):
        ScriptedPolicy({}).generate(GenerationRequest(S.SEARCH, "Q", 1, 0))
    with pytest.raises(KeyError):
        run_episode(EXAMPLE, ScriptedPolicy({}), CFG, INDEX)
    p = ScriptedPolicy({(1, "search"): ["a", "b"]})
    got = [p.generate(GenerationRequest(S.SEARCH, "Q", 1, i)) for i in range(4)]
    assert got == ["a", "b", "b", "b"]
    with pytest.raises(ValueError):
        ScriptedPolicy({(1, "search"): []})
    p = ScriptedPolicy.from_records([{"round": 1, "stage": "search", "alternatives": ["x"]}])
    assert p.generate(GenerationRequest(S.SEARCH, "Q", 1, 0)) == "x"


@pytest.mark.parametrize("stage, text, expected", [
    (S.SEARCH, "  plain query ", (SegmentKind.SEARCH, "plain query", "\n")),
    (S.SEARCH, "think first <search>q</search>", (SegmentKind.SEARCH, "q", "\nthink first ")),
    (S.ANSWER_OR_SEARCH, "<answer>x</answer>", (SegmentKind.ANSWER, "x", "\n")),
    (S.ANSWER_OR_SEARCH, "bare", None),
    (S.SEARCH, "<answer>x</answer>", None),
    (S.SEARCH, "<search></search>", None),
    (S.SEARCH, "<search>a</search><search>b</search>", None),
    (S.OBSERVATION, "", None),
])
def test_parse_generation(stage, text, expected):
    assert parse_generation(stage, text) == expected


def examples(n):
    return [QAExample(f"e{i}", f"Where is thing {i}?", ("Portal",), ("Lumbria", "Portal"), tuple(CORPUS[:2]))
            for i in range(n)]


def test_run_dataset_parallel_determinism_and_order():
    data = examples(10)
    seq = [e.to_json() for e in run_dataset(data, script(), CFG, INDEX, parallelism=1)]
    par = [e.to_json() for e in run_dataset(data, script(), CFG, INDEX, parallelism=4)]
    assert seq == par
    assert [json.loads(x)["id"] for x in par] == [e.id for e in data]


def test_run_dataset_records_failures():
    def factory(ex):
        if ex.id == "e3":
            return ScriptedPolicy({})
        return script()

    out = list(run_dataset(examples(10), factory, CFG, INDEX, parallelism=3))
    assert len(out) == 10
    fails = [o for o in out if isinstance(o, EpisodeFailure)]
    assert [f.example_id for f in fails] == ["e3"] and "KeyError" in fails[0].error
    assert sum(isinstance(o, Episode) for o in out) == 9


def test_evaluate_episodes():
    data = examples(4)
    eps = [e for e in run_dataset(data, script(), CFG, INDEX)]
    rep = evaluate_episodes(eps, data)
    assert rep.summary_line() == "EM 1.000 F1 1.000"


def test_example_records(tmp_path):
    rec = {"id": "a", "question": "Q?", "golden_answers": ["x"], "sub_answers": ["y"],
           "evidence": ["some text", {"title": "T", "text": "more"}, {"id": "d9", "text": "t"}]}
    ex = QAExample.from_record(rec)
    assert [d.doc_id for d in ex.evidence][2] == "d9"
    assert QAExample.from_record({"id": 1, "question": "Q", "answer": "x"}).golden_answers == ("x",)
    with pytest.raises(ValueError):
        QAExample("a", " ", ("x",))
    with pytest.raises(ValueError):
        QAExample("a", "Q", ("",))
    path = tmp_path / "d.jsonl"
    write_dataset_jsonl([ex], path)
    back = list(read_dataset_jsonl(path))
    assert back[0].question == "Q?" and [d.text for d in back[0].evidence] == ["some text", "more", "t"]
    path.write_text('{"question": "no id"}\n')
    with pytest.raises(ValueError, match="bad dataset record"):
        list(read_dataset_jsonl(path))


def test_engine_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(top_k=0)
    with pytest.raises(ValueError):
        EngineConfig(max_rounds=0)
    assert EngineConfig().top_k == 3 and EngineConfig().max_rounds == 8
