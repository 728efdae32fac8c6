"""Embedding-space analysis instruments.

Three views of a trained model's geometry:

* distribution of cosines between queries and their top-1 retrieved
  documents (a right-shifted distribution means tighter query/document
  alignment);
* histogram of query-query to query-document similarity ratios over random
  pairs (same-tower regularization pushes the center toward 1.0);
* an exact t-SNE map of both towers' embeddings, summarized by the
  fraction of points whose nearest 2-D neighbor comes from the opposite
  tower.

The t-SNE here is the plain O(N^2) algorithm: Gaussian input affinities
with per-row bandwidths found by binary search on entropy, Student-t
output affinities, gradient descent with momentum and early exaggeration.
No Barnes-Hut approximation; N is capped instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateInputError,
    ParameterError,
    SampleSizeError,
    ShapeError,
)
from .numerics import Rng, as_matrix
from .retrieval import Index

__all__ = [
    "Histogram",
    "DistributionStats",
    "TsneConfig",
    "Projection2D",
    "make_histogram",
    "top1_similarities",
    "top1_similarity_distribution",
    "qq_qd_ratio_histogram",
    "pairwise_sq_dists",
    "gaussian_affinities",
    "tsne",
    "inter_tower_alignment",
    "histogram_csv",
    "projection_csv",
    "projection_svg",
]

log = logging.getLogger(__name__)

MAX_TSNE_POINTS = 2000


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow


@dataclass(frozen=True)
class DistributionStats:
    """Histogram plus raw-sample statistics (mean/median are computed from
    the unbinned values)."""

    histogram: Histogram
    mean: float
    median: float
    n: int
    n_resampled: int = 0

    def summary(self) -> dict:
        return {
            "mean": self.mean,
            "median": self.median,
            "n": self.n,
            "n_resampled": self.n_resampled,
            "underflow": self.histogram.underflow,
            "overflow": self.histogram.overflow,
        }


def make_histogram(values: np.ndarray, bin_edges: np.ndarray) -> Histogram:
    """Bin values into [edges[0], edges[-1]]; the last bin is closed on the
    right and out-of-range values land in underflow/overflow."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or not (np.diff(edges) > 0).all():
        raise ParameterError("bin_edges must be >= 2 strictly increasing values")
    v = np.asarray(values, dtype=np.float64).ravel()
    counts, _ = np.histogram(v, bins=edges)
    underflow = int((v < edges[0]).sum())
    overflow = int((v > edges[-1]).sum())
    return Histogram(edges, counts.astype(np.int64), underflow, overflow)


def top1_similarities(query_embeddings: np.ndarray, index: Index) -> np.ndarray:
    """Cosine of each query with its rank-1 retrieved document."""
    q = as_matrix(query_embeddings, "query_embeddings")
    if len(index) < 1:
        raise DataError("index is empty")
    if q.shape[1] != index.embeddings.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != index dim {index.embeddings.shape[1]}")
    return (q @ index.embeddings.T).max(axis=1)


def top1_similarity_distribution(query_embeddings: np.ndarray, index: Index,
                                 bins: int) -> DistributionStats:
    """Histogram over [-1, 1] of top-1 cosines, one sample per query."""
    if bins < 2:
        raise ParameterError(f"bins must be >= 2, got {bins}")
    values = top1_similarities(query_embeddings, index)
    hist = make_histogram(values, np.linspace(-1.0, 1.0, bins + 1))
    return DistributionStats(hist, float(np.mean(values)), float(np.median(values)), values.size)


def qq_qd_ratio_histogram(q: np.ndarray, p: np.ndarray, samples: int, rng: Rng,
                          bin_edges: np.ndarray,
                          denom_floor: float = 1e-6) -> DistributionStats:
    """Histogram of sim(q_i, q_j) / sim(q_i, p_j) over random pairs i != j.

    Pairs whose denominator is within ``denom_floor`` of zero are
    resampled; the resample count is reported in the stats. Sampling is
    deterministic given ``rng``, so models compared with the same seed see
    the same pair sample (up to resampling, which the report exposes).
    """
    q = as_matrix(q, "q")
    p = as_matrix(p, "p")
    if q.shape != p.shape:
        raise ShapeError(f"query and document batches differ: {q.shape} vs {p.shape}")
    b = q.shape[0]
    if b < 2:
        raise ParameterError("need at least 2 rows to sample i != j pairs")
    if samples < 1:
        raise ParameterError("samples must be >= 1")
    qq = q @ q.T
    qp = q @ p.T

    ratios = np.empty(samples)
    have = 0
    resampled = 0
    attempts = 0
    budget = 50 * samples + 1000
    while have < samples:
        if attempts >= budget:
            raise DegenerateInputError(
                f"resample budget exhausted after {attempts} draws: "
                f"query-document similarities are persistently within {denom_floor} of zero"
            )
        chunk = min(samples - have + 64, budget - attempts)
        i = rng.integers(0, b, chunk)
        j = rng.integers(0, b, chunk)
        attempts += chunk
        distinct = i != j
        denom_ok = np.abs(qp[i, j]) >= denom_floor
        resampled += int((distinct & ~denom_ok).sum())
        keep = distinct & denom_ok
        take = min(int(keep.sum()), samples - have)
        ik, jk = i[keep][:take], j[keep][:take]
        ratios[have:have + take] = qq[ik, jk] / qp[ik, jk]
        have += take
    hist = make_histogram(ratios, bin_edges)
    return DistributionStats(hist, float(np.mean(ratios)), float(np.median(ratios)),
                             samples, n_resampled=resampled)


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 100.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch_iter: int = 250
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.perplexity < 2:
            raise ParameterError(f"perplexity must be >= 2, got {self.perplexity}")
        if self.iterations < self.exaggeration_iters:
            raise ParameterError("iterations must cover the early-exaggeration phase")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        for name in ("momentum", "final_momentum"):
            m = getattr(self, name)
            if not 0.0 <= m < 1.0:
                raise ParameterError(f"{name} must be in [0, 1), got {m}")
        if self.exaggeration < 1.0:
            raise ParameterError("exaggeration factor must be >= 1")


@dataclass
class Projection2D:
    points: np.ndarray
    labels: list[str]
    final_kl: float
    kl_after_exaggeration: float
    bandwidth_failures: list[int] = field(default_factory=list)


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, clipped at zero, zero diagonal."""
    x = as_matrix(x, "points")
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy(dist_row: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Shannon entropy (nats) and normalized affinities of one conditional
    row under precision beta. Distances are shifted by their minimum so
    large betas cannot underflow every term."""
    shifted = dist_row - dist_row.min()
    w = np.exp(-beta * shifted)
    total = w.sum()
    prob = w / total
    entropy = np.log(total) + beta * (shifted * prob).sum()
    return entropy, prob


def gaussian_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-5,
                        max_iter: int = 50) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Symmetrized, sum-1 joint affinity matrix P with per-row bandwidths.

    Each row's Gaussian precision is binary-searched until the conditional
    entropy matches log(perplexity) within ``tol``. Rows that fail to
    converge within ``max_iter`` keep their last (clamped) precision and
    are returned in the failure list.
    """
    x = as_matrix(x, "embeddings")
    n = x.shape[0]
    if n < 4:
        raise ParameterError(f"need at least 4 points, got {n}")
    if not perplexity < n - 1:
        raise ParameterError(f"perplexity {perplexity} must be < N-1 = {n - 1}")
    d = pairwise_sq_dists(x)
    if d.max() == 0.0:
        raise DegenerateInputError("all points coincide: every pairwise distance is zero")

    target = np.log(perplexity)
    cond = np.zeros((n, n))
    betas = np.ones(n)
    failures = []
    off = ~np.eye(n, dtype=bool)
    for i in range(n):
        row = d[i][off[i]]
        beta, beta_min, beta_max = 1.0, -np.inf, np.inf
        entropy, prob = _row_entropy(row, beta)
        for _ in range(max_iter):
            diff = entropy - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                beta_min = beta
                beta = beta * 2.0 if not np.isfinite(beta_max) else 0.5 * (beta + beta_max)
            else:
                beta_max = beta
                beta = beta / 2.0 if not np.isfinite(beta_min) else 0.5 * (beta + beta_min)
            entropy, prob = _row_entropy(row, beta)
        else:
            failures.append(i)
        betas[i] = beta
        cond[i][off[i]] = prob
    joint = cond + cond.T
    joint /= joint.sum()
    return joint, betas, failures


def _kl_divergence(p: np.ndarray, q_num: np.ndarray) -> float:
    """KL(P || Q) where Q is the normalized Student-t kernel ``q_num``."""
    q = q_num / q_num.sum()
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def _student_t_kernel(y: np.ndarray) -> np.ndarray:
    num = 1.0 / (1.0 + pairwise_sq_dists(y))
    np.fill_diagonal(num, 0.0)
    return num


def tsne(embeddings: np.ndarray, labels: Sequence[str], cfg: TsneConfig) -> Projection2D:
    """Exact t-SNE to 2-D. Deterministic given cfg.seed.

    Tracks KL(P||Q) against the un-exaggerated P both when the early
    exaggeration phase ends and at the final iteration, so optimization
    progress after exaggeration is observable.
    """
    x = as_matrix(embeddings, "embeddings")
    n = x.shape[0]
    if len(labels) != n:
        raise ShapeError(f"{len(labels)} labels for {n} points")
    if n > MAX_TSNE_POINTS:
        raise ParameterError(f"exact t-SNE is capped at {MAX_TSNE_POINTS} points, got {n}")
    p, _, failures = gaussian_affinities(x, cfg.perplexity)
    if failures:
        log.warning("bandwidth search did not converge for %d row(s): %s",
                    len(failures), failures[:10])

    rng = Rng(cfg.seed)
    y = rng.normal(0.0, 1e-4, (n, 2))
    velocity = np.zeros_like(y)
    kl_after_exaggeration = None
    if cfg.exaggeration_iters == 0:
        kl_after_exaggeration = _kl_divergence(p, _student_t_kernel(y))
    for it in range(cfg.iterations):
        p_eff = p * cfg.exaggeration if it < cfg.exaggeration_iters else p
        momentum = cfg.momentum if it < cfg.momentum_switch_iter else cfg.final_momentum
        num = _student_t_kernel(y)
        pq = (p_eff - num / num.sum()) * num
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
        velocity = momentum * velocity - cfg.learning_rate * grad
        y = y + velocity
        y -= y.mean(axis=0)
        if it == cfg.exaggeration_iters - 1:
            kl_after_exaggeration = _kl_divergence(p, _student_t_kernel(y))
    final_kl = _kl_divergence(p, _student_t_kernel(y))
    return Projection2D(points=y, labels=list(labels), final_kl=final_kl,
                        kl_after_exaggeration=float(kl_after_exaggeration),
                        bandwidth_failures=failures)


def inter_tower_alignment(projection: Projection2D) -> float:
    """Fraction of projected points whose nearest neighbor (ties broken in
    favor of the opposite tower) carries the other tower's label."""
    labels = np.asarray(projection.labels)
    distinct = set(labels.tolist())
    if len(distinct) < 2:
        raise DataError(f"need points from both towers, found labels {sorted(distinct)}")
    d = pairwise_sq_dists(projection.points)
    np.fill_diagonal(d, np.inf)
    nearest = d.min(axis=1)
    opposite = labels[None, :] != labels[:, None]
    hits = ((d == nearest[:, None]) & opposite).any(axis=1)
    return float(hits.mean())


def histogram_csv(hist: Histogram) -> str:
    lines = ["bin_lo,bin_hi,count"]
    for i, count in enumerate(hist.counts):
        lines.append(f"{hist.bin_edges[i]!r},{hist.bin_edges[i + 1]!r},{int(count)}")
    return "\n".join(lines) + "\n"


def projection_csv(projection: Projection2D) -> str:
    lines = ["x,y,label"]
    for (px, py), label in zip(projection.points, projection.labels):
        lines.append(f"{px!r},{py!r},{label}")
    return "\n".join(lines) + "\n"


def projection_svg(projection: Projection2D, width: int = 640, height: int = 640,
                   margin: int = 48) -> str:
    """Standalone SVG scatter of the 2-D map, one marker style per tower.

    Built by hand (axes + points only) so reports do not depend on a
    plotting stack; output is deterministic for byte-comparable reruns.
    """
    pts = projection.points
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)

    def sx(v):
        return margin + (v - lo[0]) / span[0] * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - lo[1]) / span[1] * (height - 2 * margin)

    styles = {}
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    for label in projection.labels:
        if label not in styles:
            styles[label] = palette[len(styles) % len(palette)]

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="#333" stroke-width="1"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="#333" stroke-width="1"/>',
    ]
    for k, (label, color) in enumerate(sorted(styles.items())):
        parts.append(
            f'<circle cx="{margin + 8}" cy="{margin - 24 + 14 * k:.1f}" r="4" fill="{color}"/>'
            f'<text x="{margin + 18}" y="{margin - 20 + 14 * k:.1f}" '
            f'font-family="sans-serif" font-size="11">{label}</text>'
        )
    for (px, py), label in zip(pts, projection.labels):
        parts.append(f'<circle cx="{sx(px):.2f}" cy="{sy(py):.2f}" r="3" '
                     f'fill="{styles[label]}" fill-opacity="0.65"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
