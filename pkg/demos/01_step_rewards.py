"""Step-level rewards on a two-hop question, computed one action at a time."""

from erl.corpus import Document, build_index
from erl.rewards import GoldTargets, RewardEngine

corpus = [
    Document("d1", "Xavi", "Xavi was born in Lumbria"),
    Document("d2", "Lumbria", "The capital of Lumbria is Portal"),
    Document("d3", "Portal", "Portal is a harbour city"),
    Document("d4", "Weather", "Sunny weather report today"),
]
index = build_index(corpus)

# the gold targets: two evidence documents, two intermediate answers, one final answer
gold = GoldTargets.build(index, corpus[:2], ["Lumbria", "Portal"], "Portal")
engine = RewardEngine(gold, index)
state = engine.init_state()

# a search is paid for the new gold coverage it buys, minus what it repeats
for query in ["Xavi born", "Xavi born", "capital of Lumbria"]:
    docs = [d for d, _ in index.retrieve(query, 1)]
    score, state = engine.search_reward(state, docs)
    print(f"search {query!r:24} -> {docs[0].doc_id}  gain {score.gain:+.3f}  "
          f"penalty {score.penalty:.3f}  reward {score.reward:+.3f}")

print("coverage per gold document:", [round(c, 3) for c in state.coverage])

# a sub-answer is paid only for improving the best F1 seen so far
for answer in ["Lumbria", "Lumbria", "Portal city", "Portal"]:
    r, state = engine.sub_answer_reward(state, answer)
    print(f"sub-answer {answer!r:14} -> reward {r:.3f}")

print("final answer 'Portal':", engine.final_reward("Portal"))
print("final answer 'the harbour':", engine.final_reward("the harbour"))
