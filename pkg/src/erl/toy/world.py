"""Synthetic multi-hop worlds: layered entity chains rendered as one-fact documents.

Entities are split into ``hop_depth + 1`` layers. Relation ``i`` maps layer
``i - 1`` injectively into layer ``i``, so a question starting from a layer-0
entity has exactly one answer chain and every hop has one evidence document.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..corpus import Document, write_corpus_jsonl
from ..rollout import QAExample, write_dataset_jsonl

RELATIONS = ("capital", "founder", "mayor", "anthem")
_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")
FACT_RE = re.compile(r"The (\w+) of (\w+) is (\w+)\.")


def fact_text(relation: str, subject: str, obj: str) -> str:
    return f"The {relation} of {subject} is {obj}."


def parse_fact(text: str):
    """``(relation, subject, object)`` of a fact document, or None."""
    m = FACT_RE.fullmatch(text.strip())
    return m.groups() if m else None


def _names(rng: np.random.Generator, count: int) -> list[str]:
    seen: set[str] = set()
    out = []
    while len(out) < count:
        sylls = rng.integers(0, len(_ONSETS), 3), rng.integers(0, len(_VOWELS), 3)
        name = "".join(_ONSETS[o] + _VOWELS[v] for o, v in zip(*sylls)).capitalize()
        if name not in seen:
            seen.add(name)
            out.append(name)
    return out


@dataclass
class SyntheticWorld:
    seed: int
    hop_depth: int
    layers: list[list[str]]
    relations: tuple[str, ...]
    facts: dict[tuple[str, str], str] = field(default_factory=dict)

    @property
    def entities(self) -> list[str]:
        return [e for layer in self.layers for e in layer]

    def chain(self, start: str) -> list[str]:
        out, cur = [], start
        for rel in self.relations:
            cur = self.facts[(rel, cur)]
            out.append(cur)
        return out

    def question(self, start: str) -> str:
        inner = start
        for rel in self.relations:
            inner = f"the {rel} of {inner}"
        return f"What is {inner}?"


def make_world(seed: int, hop_depth: int = 2, n_entities: int = 12):
    """Build ``(world, corpus, dataset)`` deterministically from ``seed``."""
    if not 2 <= hop_depth <= len(RELATIONS):
        raise ValueError(f"hop_depth must be in [2, {len(RELATIONS)}]")
    if n_entities < hop_depth + 1:
        raise ValueError("n_entities must be at least hop_depth + 1")
    rng = np.random.default_rng(seed)
    names = _names(rng, n_entities)
    n_layers = hop_depth + 1
    base, extra = divmod(n_entities, n_layers)
    # leftover entities go to the deepest layers so every map can be injective
    sizes = [base + (1 if i >= n_layers - extra else 0) for i in range(n_layers)]
    layers, pos = [], 0
    for s in sizes:
        layers.append(names[pos:pos + s])
        pos += s
    relations = RELATIONS[:hop_depth]
    world = SyntheticWorld(seed, hop_depth, layers, relations)
    corpus = []
    for i, rel in enumerate(relations):
        targets = rng.permutation(len(layers[i + 1]))
        for j, subj in enumerate(layers[i]):
            obj = layers[i + 1][int(targets[j])]
            world.facts[(rel, subj)] = obj
            corpus.append(Document(f"f{len(corpus):04d}", subj, fact_text(rel, subj, obj)))
    by_text = {d.text: d for d in corpus}
    dataset = []
    for n, start in enumerate(layers[0]):
        chain = world.chain(start)
        subjects = [start] + chain[:-1]
        evidence = tuple(by_text[fact_text(r, s, o)] for r, s, o in zip(relations, subjects, chain))
        dataset.append(QAExample(f"w{seed}-{n:03d}", world.question(start), (chain[-1],),
                                 tuple(chain), evidence))
    return world, corpus, dataset


def write_world(corpus, dataset, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus_jsonl(corpus, out / "corpus.jsonl")
    write_dataset_jsonl(dataset, out / "dataset.jsonl")
    return out / "corpus.jsonl", out / "dataset.jsonl"
