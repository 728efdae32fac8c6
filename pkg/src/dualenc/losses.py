"""Contrastive objectives over a batch of unit-norm tower embeddings.

All losses are means over batch rows of a negative log softmax fraction.
The basic in-batch objective contrasts each query against every document
in the batch; the same-tower variant ("samtone") additionally places
query-query (and, bidirectionally, document-document) similarities in the
denominator; the hybrid "pair" objective mixes the basic loss with a
document-document penalizing term weighted by alpha.

Gradients are returned with respect to the normalized embeddings Q and P,
so each objective is finite-difference checkable in isolation; chaining
into raw parameters is the encoder's job. Every softmax is computed with
max-subtraction: at temperature 0.01 the logits reach magnitude ~100 and
naive exponentials overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError
from .numerics import as_matrix

__all__ = [
    "SimMatrices",
    "LossConfig",
    "LossResult",
    "similarity_matrices",
    "contrastive_loss",
    "bidirectional_loss",
    "samtone_loss",
    "pair_loss",
    "duplicate_mask",
    "evaluate_loss",
]

OBJECTIVES = ("standard", "samtone", "pair")
SAMTONE_MODES = ("off", "query_side", "bidirectional")


@dataclass(frozen=True)
class SimMatrices:
    """Cross- and same-tower cosine similarity matrices for one batch.

    The source embeddings are retained so losses can chain their gradients
    back to Q and P rows.
    """

    qp: np.ndarray
    qq: np.ndarray
    pp: np.ndarray
    q: np.ndarray
    p: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.qp.shape[0]


@dataclass(frozen=True)
class LossConfig:
    objective: str = "standard"
    temperature: float = 0.01
    pair_alpha: float = 0.1
    samtone_mode: str = "off"
    bidirectional_base: bool = True
    mask_duplicate_docs: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.samtone_mode not in SAMTONE_MODES:
            raise ParameterError(f"samtone_mode must be one of {SAMTONE_MODES}")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.pair_alpha <= 1.0:
            raise ParameterError(f"pair_alpha must be in [0, 1], got {self.pair_alpha}")
        if self.objective == "samtone" and self.samtone_mode == "off":
            raise ParameterError("objective 'samtone' requires samtone_mode 'query_side' or 'bidirectional'")


@dataclass(frozen=True)
class LossResult:
    loss: float
    grad_q: np.ndarray
    grad_p: np.ndarray


def similarity_matrices(q: np.ndarray, p: np.ndarray) -> SimMatrices:
    """qp = Q P^T, qq = Q Q^T, pp = P P^T. Rows are expected unit-norm, so
    dot products are cosines."""
    q = as_matrix(q, "q")
    p = as_matrix(p, "p")
    if q.shape != p.shape:
        raise ShapeError(f"query and document batches differ in shape: {q.shape} vs {p.shape}")
    return SimMatrices(qp=q @ p.T, qq=q @ q.T, pp=p @ p.T, q=q, p=p)


def duplicate_mask(doc_keys: Sequence) -> np.ndarray:
    """mask[i, j] is True iff i != j and doc_keys[i] == doc_keys[j]."""
    keys = list(doc_keys)
    n = len(keys)
    groups: dict = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    mask = np.zeros((n, n), dtype=bool)
    for idx in groups.values():
        if len(idx) > 1:
            ix = np.asarray(idx)
            mask[np.ix_(ix, ix)] = True
    np.fill_diagonal(mask, False)
    return mask


def _row_lse(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp with max-subtraction; rows that are entirely
    -inf yield -inf."""
    m = logits.max(axis=1)
    finite = np.isfinite(m)
    out = np.full(logits.shape[0], -np.inf)
    if finite.any():
        mf = m[finite, None]
        out[finite] = m[finite] + np.log(np.exp(logits[finite] - mf).sum(axis=1))
    return out


def _direction(cross: np.ndarray, same: np.ndarray | None, tau: float,
               same_excluded: np.ndarray | None = None):
    """One softmax direction. Anchors are rows of ``cross`` with positives
    on the diagonal; ``same`` optionally contributes same-tower logits,
    always excluding the diagonal plus any ``same_excluded`` positions.

    Returns (mean row loss, d loss / d cross, d loss / d same); gradient
    matrices already carry the 1/(B tau) factor. An absent or fully
    excluded ``same`` block reproduces the plain direction bit-for-bit
    (logaddexp with -inf is exact).
    """
    b = cross.shape[0]
    logits = cross / tau
    lse = _row_lse(logits)
    g_same = None
    if same is not None:
        excl = np.eye(b, dtype=bool)
        if same_excluded is not None:
            excl = excl | same_excluded
        same_logits = np.where(excl, -np.inf, same / tau)
        lse = np.logaddexp(lse, _row_lse(same_logits))
        g_same = np.exp(same_logits - lse[:, None]) / (b * tau)
    loss = float(np.mean(lse - np.diagonal(logits)))
    g_cross = (np.exp(logits - lse[:, None]) - np.eye(b)) / (b * tau)
    return loss, g_cross, g_same


def _assemble(s: SimMatrices, g_qp, g_qq=None, g_pp=None) -> tuple[np.ndarray, np.ndarray]:
    """Chain similarity-matrix gradients to the embedding rows."""
    grad_q = g_qp @ s.p
    grad_p = g_qp.T @ s.q
    if g_qq is not None:
        grad_q = grad_q + (g_qq + g_qq.T) @ s.q
    if g_pp is not None:
        grad_p = grad_p + (g_pp + g_pp.T) @ s.p
    return grad_q, grad_p


def contrastive_loss(s: SimMatrices, cfg: LossConfig) -> LossResult:
    """In-batch softmax loss, query-to-document direction only."""
    loss, g_qp, _ = _direction(s.qp, None, cfg.temperature)
    grad_q, grad_p = _assemble(s, g_qp)
    return LossResult(loss, grad_q, grad_p)


def bidirectional_loss(s: SimMatrices, cfg: LossConfig) -> LossResult:
    """Mean of the row-wise (q->p) and column-wise (p->q) softmax losses."""
    tau = cfg.temperature
    l1, g1, _ = _direction(s.qp, None, tau)
    l2, g2, _ = _direction(s.qp.T, None, tau)
    g_qp = 0.5 * (g1 + g2.T)
    grad_q, grad_p = _assemble(s, g_qp)
    return LossResult(0.5 * (l1 + l2), grad_q, grad_p)


def samtone_loss(s: SimMatrices, cfg: LossConfig, pp_mask: np.ndarray | None = None) -> LossResult:
    """Same-tower-negative loss.

    query_side adds query-query terms to the q->p denominator;
    bidirectional additionally runs the p->q direction with document-
    document terms (subject to the duplicate mask). The plain p->q
    direction is kept whenever ``bidirectional_base`` is set, matching the
    convention that the base in-batch loss is bidirectional.
    """
    tau = cfg.temperature
    mode = cfg.samtone_mode
    if mode not in ("query_side", "bidirectional"):
        raise ParameterError(f"samtone_loss requires samtone_mode 'query_side' or 'bidirectional', got {mode!r}")
    mask = pp_mask if cfg.mask_duplicate_docs else None
    if mask is not None and mask.shape != s.pp.shape:
        raise ShapeError(f"pp_mask shape {mask.shape} != {s.pp.shape}")

    l1, g1, g_qq = _direction(s.qp, s.qq, tau)
    if mode == "bidirectional":
        l2, g2, g_pp = _direction(s.qp.T, s.pp, tau, same_excluded=mask)
    elif cfg.bidirectional_base:
        l2, g2, g_pp = _direction(s.qp.T, None, tau)
    else:
        grad_q, grad_p = _assemble(s, g1, g_qq=g_qq)
        return LossResult(l1, grad_q, grad_p)
    g_qp = 0.5 * (g1 + g2.T)
    grad_q, grad_p = _assemble(s, g_qp, g_qq=0.5 * g_qq, g_pp=None if g_pp is None else 0.5 * g_pp)
    return LossResult(0.5 * (l1 + l2), grad_q, grad_p)


def pair_loss(s: SimMatrices, cfg: LossConfig, pp_mask: np.ndarray | None = None) -> LossResult:
    """Hybrid loss: (1 - alpha) times the basic loss plus alpha times a
    term whose denominator sums document-document similarities over j != i.

    The document term's denominator contains no positive entry, exactly as
    displayed in its source formulation, so the alpha component can be
    negative when the positive pair is more similar than the in-batch
    documents are to each other. alpha = 0 delegates to contrastive_loss
    and is bit-identical to it.
    """
    alpha = cfg.pair_alpha
    if alpha == 0.0:
        return contrastive_loss(s, cfg)
    b = s.batch_size
    if b < 2:
        raise ParameterError("pair loss with alpha > 0 needs batch size >= 2: its denominator sums over j != i")
    tau = cfg.temperature
    l_c, g_c, _ = _direction(s.qp, None, tau)

    excl = np.eye(b, dtype=bool)
    if cfg.mask_duplicate_docs and pp_mask is not None:
        excl = excl | pp_mask
    if excl.all(axis=1).any():
        row = int(np.flatnonzero(excl.all(axis=1))[0])
        raise DegenerateInputError(f"row {row}: every document-document term is masked; pair denominator is empty")
    pp_logits = np.where(excl, -np.inf, s.pp / tau)
    lse_p = _row_lse(pp_logits)
    l_p = float(np.mean(lse_p - np.diagonal(s.qp) / tau))

    g_qp = (1.0 - alpha) * g_c - (alpha / (b * tau)) * np.eye(b)
    g_pp = alpha * np.exp(pp_logits - lse_p[:, None]) / (b * tau)
    grad_q, grad_p = _assemble(s, g_qp, g_pp=g_pp)
    return LossResult((1.0 - alpha) * l_c + alpha * l_p, grad_q, grad_p)


def evaluate_loss(s: SimMatrices, cfg: LossConfig, pp_mask: np.ndarray | None = None) -> LossResult:
    """Dispatch on cfg.objective; the trainer's single entry point."""
    if cfg.objective == "standard":
        return bidirectional_loss(s, cfg) if cfg.bidirectional_base else contrastive_loss(s, cfg)
    if cfg.objective == "samtone":
        return samtone_loss(s, cfg, pp_mask=pp_mask)
    return pair_loss(s, cfg, pp_mask=pp_mask)
