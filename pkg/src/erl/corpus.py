"""TF-IDF corpus index: ingestion, vectorization, cosine similarity and top-k retrieval.

Term weights are raw counts times a smoothed inverse document frequency
``ln((1 + N) / (1 + df)) + 1``; every stored vector is L2-normalized so the
cosine of two vectors is their dot product.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

INDEX_FORMAT = "erl-tfidf-index"
INDEX_VERSION = 1
DEFAULT_TOP_K = 3

_TOKEN_RE = re.compile(r"[^\W_]+")


class CorpusError(ValueError):
    """Raised for malformed or inconsistent corpus input."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def content_id(title: str, text: str) -> str:
    digest = hashlib.sha1(f"{title}\x00{text}".encode("utf-8")).hexdigest()
    return "h" + digest[:16]


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str

    @classmethod
    def from_text(cls, text: str, title: str = "") -> "Document":
        """Build a document whose id is derived from its content."""
        return cls(content_id(title, text), title, text)

    def to_record(self) -> dict:
        return {"id": self.doc_id, "title": self.title, "text": self.text}

    @classmethod
    def from_record(cls, rec: Mapping) -> "Document":
        try:
            doc_id, text = rec["id"], rec["text"]
        except KeyError as exc:
            raise CorpusError(f"document record missing field {exc.args[0]!r}") from None
        return cls(str(doc_id), str(rec.get("title", "")), str(text))


@dataclass(frozen=True)
class SparseVector:
    """Nonnegative, L2-normalized sparse vector keyed by term id."""

    entries: Mapping[int, float] = field(default_factory=dict)

    @property
    def norm(self) -> float:
        return math.sqrt(sum(w * w for w in self.entries.values()))

    def __len__(self) -> int:
        return len(self.entries)

    def to_dense(self, size: int) -> list[float]:
        out = [0.0] * size
        for tid, w in self.entries.items():
            out[tid] = w
        return out


EMPTY_VECTOR = SparseVector({})


def _normalized(weights: dict[int, float]) -> SparseVector:
    norm = math.sqrt(sum(w * w for w in weights.values()))
    if norm == 0.0:
        return EMPTY_VECTOR
    return SparseVector({tid: weights[tid] / norm for tid in sorted(weights)})


def cosine_similarity(a: SparseVector, b: SparseVector) -> float:
    """Dot product of two normalized vectors, clamped to [0, 1]; 0 if either is empty."""
    if not a.entries or not b.entries:
        return 0.0
    if len(a.entries) > len(b.entries):
        a, b = b, a
    other = b.entries
    dot = sum(w * other[t] for t, w in a.entries.items() if t in other)
    return min(1.0, max(0.0, dot))


@dataclass
class TfIdfIndex:
    vocabulary: dict[str, int]
    idf: list[float]
    documents: dict[str, Document]
    doc_vectors: dict[str, SparseVector]
    postings: dict[int, list[tuple[str, float]]]

    @property
    def doc_count(self) -> int:
        return len(self.documents)

    def vectorize(self, text: str) -> SparseVector:
        return vectorize(self, text)

    def vector_for(self, doc: Document) -> SparseVector:
        """Stored vector when ``doc`` is indexed with identical text, else a fresh one."""
        stored = self.documents.get(doc.doc_id)
        if stored is not None and stored.text == doc.text:
            return self.doc_vectors[doc.doc_id]
        return vectorize(self, doc.text)

    def retrieve(self, query: str, k: int = DEFAULT_TOP_K) -> list[tuple[Document, float]]:
        return retrieve(self, query, k)

    # -- persistence -------------------------------------------------------

    def to_json(self) -> str:
        terms = sorted(self.vocabulary, key=self.vocabulary.__getitem__)
        payload = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "doc_count": self.doc_count,
            "terms": terms,
            "idf": self.idf,
            "documents": [
                {
                    **self.documents[doc_id].to_record(),
                    "vector": [[t, w] for t, w in self.doc_vectors[doc_id].entries.items()],
                }
                for doc_id in sorted(self.documents)
            ],
        }
        return json.dumps(payload, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, data: str) -> "TfIdfIndex":
        payload = json.loads(data)
        if payload.get("format") != INDEX_FORMAT:
            raise CorpusError("not an index file (bad format tag)")
        if payload.get("version") != INDEX_VERSION:
            raise CorpusError(f"unsupported index version {payload.get('version')!r}")
        vocabulary = {term: i for i, term in enumerate(payload["terms"])}
        documents: dict[str, Document] = {}
        vectors: dict[str, SparseVector] = {}
        for rec in payload["documents"]:
            doc = Document.from_record(rec)
            documents[doc.doc_id] = doc
            vectors[doc.doc_id] = SparseVector({int(t): float(w) for t, w in rec["vector"]})
        return cls(vocabulary, [float(x) for x in payload["idf"]], documents, vectors,
                   _build_postings(vectors))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TfIdfIndex":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _build_postings(vectors: Mapping[str, SparseVector]) -> dict[int, list[tuple[str, float]]]:
    postings: dict[int, list[tuple[str, float]]] = {}
    for doc_id in sorted(vectors):
        for tid, w in vectors[doc_id].entries.items():
            postings.setdefault(tid, []).append((doc_id, w))
    return postings


def build_index(corpus: Iterable[Document]) -> TfIdfIndex:
    """Index a stream of documents. Term ids follow sorted term order."""
    documents: dict[str, Document] = {}
    counts: dict[str, Counter] = {}
    for doc in corpus:
        if not doc.doc_id:
            raise CorpusError("document with empty id")
        if doc.doc_id in documents:
            raise CorpusError(f"duplicate doc_id {doc.doc_id!r}")
        if not doc.text:
            raise CorpusError(f"document {doc.doc_id!r} has empty text")
        documents[doc.doc_id] = doc
        counts[doc.doc_id] = Counter(tokenize(doc.text))
    if not documents:
        raise CorpusError("empty corpus")

    df: Counter = Counter()
    for c in counts.values():
        df.update(c.keys())
    terms = sorted(df)
    vocabulary = {term: i for i, term in enumerate(terms)}
    n = len(documents)
    idf = [math.log((1 + n) / (1 + df[term])) + 1.0 for term in terms]

    vectors = {
        doc_id: _normalized({vocabulary[t]: tf * idf[vocabulary[t]] for t, tf in c.items()})
        for doc_id, c in counts.items()
    }
    return TfIdfIndex(vocabulary, idf, documents, vectors, _build_postings(vectors))


def vectorize(index: TfIdfIndex, text: str) -> SparseVector:
    """Project ``text`` onto the index vocabulary; out-of-vocabulary terms are dropped."""
    weights: dict[int, float] = {}
    for term, tf in Counter(tokenize(text)).items():
        tid = index.vocabulary.get(term)
        if tid is not None:
            weights[tid] = tf * index.idf[tid]
    return _normalized(weights)


def retrieve(index: TfIdfIndex, query: str, k: int = DEFAULT_TOP_K) -> list[tuple[Document, float]]:
    """Top-k documents by cosine score, ties broken by ascending doc_id.

    Only documents sharing at least one term with the query are returned, so the
    result may be shorter than ``k`` (and is empty for a query with no known terms).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    qvec = vectorize(index, query)
    scores: dict[str, float] = {}
    for tid, qw in qvec.entries.items():
        for doc_id, dw in index.postings.get(tid, ()):
            scores[doc_id] = scores.get(doc_id, 0.0) + qw * dw
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return [(index.documents[doc_id], min(1.0, s)) for doc_id, s in ranked]


def read_corpus_jsonl(path: str | Path) -> Iterator[Document]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            yield Document.from_record(rec)


def write_corpus_jsonl(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
