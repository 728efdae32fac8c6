"""Corpus ingestion, duplicate-rate statistics, and synthetic corpora.

The interchange format is JSON-lines, one object per training pair:

    {"query_id": ..., "query": ..., "doc_id": ..., "doc": ..., "rel": optional}

Synthetic corpora give each topic a disjoint slice of the word pool.
Queries and their gold documents sample words from the owning topic's
slice (mixed with globally drawn noise words), and documents are reused
across queries of the same topic so the unique-document rate lands on a
controllable target. That is the knob behind the duplicate-document
experiments: a low rate makes document-side same-tower negatives
penalize identical documents.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable

from .errors import DataError, ParameterError, ParseError, SchemaError
from .encoder import atomic_write_text
from .numerics import Rng

__all__ = [
    "PairRecord",
    "PairCorpus",
    "SynthConfig",
    "load_corpus",
    "save_corpus",
    "unique_document_rate",
    "generate_synthetic",
]

_REQUIRED_FIELDS = ("query_id", "query", "doc_id", "doc")
_OPTIONAL_FIELDS = ("rel",)


@dataclass(frozen=True)
class PairRecord:
    query_id: str
    query: str
    doc_id: str
    doc: str
    rel: int | None = None


@dataclass
class PairCorpus:
    records: list[PairRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def doc_items(self) -> list[tuple[str, str]]:
        """(doc_id, doc_text) pairs in record order, repeats included."""
        return [(r.doc_id, r.doc) for r in self.records]

    def validate(self):
        if not self.records:
            raise DataError("corpus is empty")
        seen = {}
        for i, r in enumerate(self.records):
            if not r.query or not r.doc:
                raise DataError(f"record {i}: texts must be non-empty")
            if r.query_id in seen:
                raise DataError(f"duplicate query_id {r.query_id!r} at records {seen[r.query_id]} and {i}")
            seen[r.query_id] = i


def load_corpus(path) -> PairCorpus:
    """Parse a JSON-lines corpus; errors carry 1-based line numbers."""
    records = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{lineno}: record must be a JSON object")
            missing = [f for f in _REQUIRED_FIELDS if f not in obj]
            if missing:
                raise SchemaError(f"{path}:{lineno}: missing field(s) {missing}")
            unknown = [k for k in obj if k not in _REQUIRED_FIELDS + _OPTIONAL_FIELDS]
            if unknown:
                raise SchemaError(f"{path}:{lineno}: unknown field(s) {unknown}")
            qid = str(obj["query_id"])
            if qid in seen:
                raise DataError(f"{path}:{lineno}: duplicate query_id {qid!r} (first seen line {seen[qid]})")
            seen[qid] = lineno
            query, doc = str(obj["query"]), str(obj["doc"])
            if not query.strip() or not doc.strip():
                raise DataError(f"{path}:{lineno}: query and doc must be non-empty")
            rel = obj.get("rel")
            records.append(PairRecord(qid, query, str(obj["doc_id"]), doc, None if rel is None else int(rel)))
    if not records:
        raise DataError(f"{path}: empty corpus")
    return PairCorpus(records)


def save_corpus(path, corpus: PairCorpus):
    """Write JSON-lines atomically; round-trips through load_corpus."""
    lines = []
    for r in corpus:
        obj = {"query_id": r.query_id, "query": r.query, "doc_id": r.doc_id, "doc": r.doc}
        if r.rel is not None:
            obj["rel"] = r.rel
        lines.append(json.dumps(obj, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")


def unique_document_rate(corpus: PairCorpus) -> float:
    """Distinct doc_id count divided by record count."""
    if len(corpus) == 0:
        raise DataError("corpus is empty")
    return len({r.doc_id for r in corpus}) / len(corpus)


@dataclass(frozen=True)
class SynthConfig:
    num_topics: int = 8
    queries_per_topic: int = 125
    vocab_size: int = 512
    tokens_per_text: tuple[int, int] = (6, 12)
    unique_doc_rate: float = 0.95
    noise_rate: float = 0.1
    seed: int = 7

    def __post_init__(self):
        if self.num_topics < 1 or self.queries_per_topic < 1:
            raise ParameterError("num_topics and queries_per_topic must be >= 1")
        if self.vocab_size < self.num_topics:
            raise ParameterError("vocab_size must cover at least one word per topic")
        lo, hi = self.tokens_per_text
        if not 1 <= lo <= hi <= 64:
            raise ParameterError(f"tokens_per_text must satisfy 1 <= lo <= hi <= 64, got {self.tokens_per_text}")
        if not 0.0 < self.unique_doc_rate <= 1.0:
            raise ParameterError(f"unique_doc_rate must be in (0, 1], got {self.unique_doc_rate}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ParameterError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        total = self.num_topics * self.queries_per_topic
        if self.unique_doc_rate * total < 1:
            raise ParameterError("unique_doc_rate * total queries must be >= 1")


def _topic_pools(cfg: SynthConfig) -> list[range]:
    """Disjoint, contiguous word-index slices, one per topic."""
    per = cfg.vocab_size // cfg.num_topics
    return [range(t * per, (t + 1) * per) for t in range(cfg.num_topics)]


def _sample_text(rng: Rng, pool: range, cfg: SynthConfig) -> str:
    lo, hi = cfg.tokens_per_text
    length = int(rng.integers(lo, hi + 1))
    words = []
    for _ in range(length):
        if cfg.noise_rate > 0 and rng.uniform(0.0, 1.0) < cfg.noise_rate:
            idx = int(rng.integers(0, cfg.vocab_size))
        else:
            idx = pool[int(rng.integers(0, len(pool)))]
        words.append(f"w{idx:05d}")
    return " ".join(words)


def _apportion_unique_docs(total_queries: int, per_topic: int, num_topics: int, rate: float) -> list[int]:
    """Unique-doc counts per topic whose sum hits round(rate * total)."""
    target = max(1, round(rate * total_queries))
    base, extra = divmod(target, num_topics)
    counts = [base + (1 if t < extra else 0) for t in range(num_topics)]
    for t, count in enumerate(counts):
        if count < 1:
            raise ParameterError(
                f"unique_doc_rate {rate} infeasible: topic {t} would own no unique document"
            )
        if count > per_topic:
            raise ParameterError(
                f"unique_doc_rate {rate} infeasible: topic {t} needs {count} unique docs "
                f"but has only {per_topic} queries"
            )
    return counts


def _build_split(cfg: SynthConfig, rng: Rng, per_topic: int, query_prefix: str, doc_prefix: str) -> PairCorpus:
    pools = _topic_pools(cfg)
    total = cfg.num_topics * per_topic
    counts = _apportion_unique_docs(total, per_topic, cfg.num_topics, cfg.unique_doc_rate)
    records = []
    qn = 0
    for t in range(cfg.num_topics):
        topic_rng = rng.split(t)
        docs = [
            (f"{doc_prefix}{t:02d}_{k:04d}", _sample_text(topic_rng.split(("doc", k)), pools[t], cfg))
            for k in range(counts[t])
        ]
        for i in range(per_topic):
            doc_id, doc_text = docs[i % counts[t]]
            query = _sample_text(topic_rng.split(("query", i)), pools[t], cfg)
            records.append(PairRecord(f"{query_prefix}{qn:05d}", query, doc_id, doc_text))
            qn += 1
    return PairCorpus(records)


def generate_synthetic(cfg: SynthConfig) -> tuple[PairCorpus, PairCorpus, dict[str, dict[str, int]]]:
    """Build (train, test, judgments), all deterministic given cfg.seed.

    The test split draws fresh queries and documents from the same topic
    pools, with ids disjoint from the train split; its size is
    ceil(queries_per_topic / 4) queries per topic. Judgments mark each
    test query's gold document relevant at grade 1.
    """
    rng = Rng(cfg.seed)
    train = _build_split(cfg, rng.split("train"), cfg.queries_per_topic, "q", "d")
    test_per_topic = max(1, math.ceil(cfg.queries_per_topic / 4))
    test = _build_split(cfg, rng.split("test"), test_per_topic, "tq", "td")
    judgments = {r.query_id: {r.doc_id: 1} for r in test}
    train.validate()
    test.validate()
    return train, test, judgments
