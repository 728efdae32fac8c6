"""Exact brute-force cosine retrieval and ranking metrics.

The index is a dense matrix of unit-norm document embeddings, so dot
products against a unit-norm query are cosines and an exhaustive scan is
exact. Approximate structures are deliberately out of scope: the point of
the experiments is embedding quality, and ANN recall would confound it.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import PairCorpus
from .encoder import ModelParams, atomic_write_text, encode_batch, tokenize
from .errors import DataError, ParameterError

__all__ = [
    "Index",
    "build_index",
    "knn",
    "rank_queries",
    "precision_at_1",
    "mrr",
    "ndcg_at_10",
    "random_ranking_mrr",
    "save_rankings_tsv",
    "load_judgments_tsv",
    "save_judgments_tsv",
    "judgments_from_corpus",
]

log = logging.getLogger(__name__)

Rankings = Mapping[str, Sequence[tuple[str, float]]]
Judgments = Mapping[str, Mapping[str, int]]


@dataclass(frozen=True)
class Index:
    """Unit-norm document embeddings plus aligned candidate ids."""

    embeddings: np.ndarray
    candidate_ids: list[str]

    def __len__(self) -> int:
        return len(self.candidate_ids)


def build_index(params: ModelParams, corpus_docs: Sequence[tuple[str, str]]) -> Index:
    """Encode one row per unique candidate id, in first-appearance order.

    Corpora legitimately repeat (doc_id, text) records when documents are
    shared across queries; exact repeats collapse to one row. The same id
    with conflicting text is a data error.
    """
    if not corpus_docs:
        raise DataError("cannot index an empty corpus")
    texts: dict[str, str] = {}
    order: list[str] = []
    for doc_id, text in corpus_docs:
        if doc_id in texts:
            if texts[doc_id] != text:
                raise DataError(f"candidate id {doc_id!r} appears with conflicting texts")
            continue
        texts[doc_id] = text
        order.append(doc_id)
    seqs = [tokenize(texts[i], params.config.vocab_size) for i in order]
    return Index(embeddings=encode_batch(params, "doc", seqs), candidate_ids=order)


def knn(query_embedding: np.ndarray, index: Index, k: int) -> list[tuple[str, float]]:
    """Top-k candidates by dot product, descending; ties broken by
    ascending insertion order (stable sort on the negated scores)."""
    n = len(index)
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    q = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.embeddings.shape[1]:
        raise ParameterError(f"query dim {q.shape[0]} != index dim {index.embeddings.shape[1]}")
    scores = index.embeddings @ q
    top = np.argsort(-scores, kind="stable")[:k]
    return [(index.candidate_ids[i], float(scores[i])) for i in top]


def rank_queries(params: ModelParams, index: Index, queries: Sequence[tuple[str, str]],
                 k: int | None = None) -> dict[str, list[tuple[str, float]]]:
    """Full (or top-k) rankings for (query_id, query_text) pairs."""
    if not queries:
        raise DataError("no queries to rank")
    k = len(index) if k is None else k
    seqs = [tokenize(text, params.config.vocab_size) for _, text in queries]
    embeddings = encode_batch(params, "query", seqs)
    return {qid: knn(embeddings[i], index, k) for i, (qid, _) in enumerate(queries)}


def _check_judged(rankings: Rankings, judgments: Judgments):
    for qid in rankings:
        if qid not in judgments:
            raise DataError(f"query {qid!r} missing from judgments")
        if not any(g > 0 for g in judgments[qid].values()):
            raise DataError(f"query {qid!r} has no relevant candidate in judgments")


def precision_at_1(rankings: Rankings, judgments: Judgments) -> float:
    """Fraction of queries whose rank-1 candidate has grade > 0."""
    _check_judged(rankings, judgments)
    hits = sum(
        1 for qid, ranked in rankings.items() if judgments[qid].get(ranked[0][0], 0) > 0
    )
    return hits / len(rankings)


def mrr(rankings: Rankings, judgments: Judgments, cutoff: int | None = None) -> float:
    """Mean reciprocal rank of the first relevant candidate.

    Uncut by default; pass ``cutoff`` to ignore relevants below that rank.
    A query whose ranking contains no relevant candidate contributes 0 and
    is logged.
    """
    _check_judged(rankings, judgments)
    total = 0.0
    for qid, ranked in rankings.items():
        limit = len(ranked) if cutoff is None else min(cutoff, len(ranked))
        rr = 0.0
        for rank0 in range(limit):
            if judgments[qid].get(ranked[rank0][0], 0) > 0:
                rr = 1.0 / (rank0 + 1)
                break
        if rr == 0.0:
            log.warning("query %s: no relevant candidate in ranking; contributes 0 to MRR", qid)
        total += rr
    return total / len(rankings)


def _dcg(grades: Sequence[int]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(rank + 2) for rank, g in enumerate(grades))


def ndcg_at_10(rankings: Rankings, judgments: Judgments) -> float:
    """Mean NDCG@10 with exponential gain 2^grade - 1 and log2 discount."""
    _check_judged(rankings, judgments)
    total = 0.0
    for qid, ranked in rankings.items():
        grades = [judgments[qid].get(cid, 0) for cid, _ in ranked[:10]]
        ideal = sorted(judgments[qid].values(), reverse=True)[:10]
        idcg = _dcg(ideal)
        if idcg == 0.0:
            raise DataError(f"query {qid!r} has all-zero grades")
        total += _dcg(grades) / idcg
    return total / len(rankings)


def random_ranking_mrr(num_candidates: int, num_relevant: int = 1) -> float:
    """Expected MRR of a uniformly random ranking.

    With one relevant candidate among N, its rank is uniform, so the
    expectation is H(N)/N. Used as the analytic floor that trained models
    must clear.
    """
    if num_candidates < 1 or not 1 <= num_relevant <= num_candidates:
        raise ParameterError("need 1 <= num_relevant <= num_candidates")
    if num_relevant == 1:
        return sum(1.0 / r for r in range(1, num_candidates + 1)) / num_candidates
    # P(first relevant at rank r) via hypergeometric survival
    n, m = num_candidates, num_relevant
    total = 0.0
    prob_above = 1.0
    for r in range(1, n - m + 2):
        p_here = prob_above * m / (n - r + 1)
        total += p_here / r
        prob_above *= (n - m - r + 1) / (n - r + 1)
    return total


def save_rankings_tsv(path, rankings: Rankings):
    """TSV rows: query_id, rank (1-based), candidate_id, score."""
    lines = ["query_id\trank\tcandidate_id\tscore"]
    for qid in rankings:
        for rank0, (cid, score) in enumerate(rankings[qid]):
            lines.append(f"{qid}\t{rank0 + 1}\t{cid}\t{score!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_judgments_tsv(path) -> dict[str, dict[str, int]]:
    """TSV rows: query_id, candidate_id, grade (nonnegative int)."""
    judgments: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        for lineno, row in enumerate(reader, start=1):
            if not row or row == ["query_id", "candidate_id", "grade"]:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(row)}")
            qid, cid, grade = row
            try:
                g = int(grade)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: grade {grade!r} is not an integer") from exc
            if g < 0:
                raise DataError(f"{path}:{lineno}: grade must be nonnegative")
            judgments.setdefault(qid, {})[cid] = g
    if not judgments:
        raise DataError(f"{path}: no judgments found")
    return judgments


def save_judgments_tsv(path, judgments: Judgments):
    lines = ["query_id\tcandidate_id\tgrade"]
    for qid in judgments:
        for cid, grade in judgments[qid].items():
            lines.append(f"{qid}\t{cid}\t{int(grade)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def judgments_from_corpus(corpus: PairCorpus) -> dict[str, dict[str, int]]:
    """Gold judgments implied by a pair corpus: each query's paired doc is
    relevant, at the record's ``rel`` grade when present (default 1)."""
    return {r.query_id: {r.doc_id: 1 if r.rel is None else r.rel} for r in corpus}
