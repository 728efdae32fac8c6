"""Mini-batch training loop with in-batch negatives.

Each step encodes a batch through both towers, evaluates the configured
objective, chains gradients back to the parameter tables, and applies one
optimizer update at the linearly decaying learning rate. The loop is
deterministic: (seed, config, corpus) fixes the batch order, the
initialization, and therefore the checkpoint bytes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .data import PairCorpus
from .encoder import (
    ModelParams,
    TowerConfig,
    encode_backward,
    encode_batch,
    init_params,
    tokenize,
)
from .errors import DataError, DivergenceError, ParameterError
from .losses import LossConfig, duplicate_mask, evaluate_loss, similarity_matrices
from .numerics import Rng

__all__ = [
    "TrainConfig",
    "TrainLog",
    "Batch",
    "lr_schedule",
    "make_batches",
    "make_optimizer",
    "SgdOptimizer",
    "AdamOptimizer",
    "train_step",
    "train",
]

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr0: float = 1e-3
    optimizer: str = "adam"
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 7
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr0 > 0:
            raise ParameterError(f"lr0 must be positive, got {self.lr0}")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"optimizer must be one of {OPTIMIZERS}")
        if self.checkpoint_every < 0:
            raise ParameterError("checkpoint_every must be >= 0")
        same_tower = self.loss.objective in ("samtone", "pair")
        if same_tower and self.batch_size < 2:
            raise ParameterError("same-tower and pair objectives need batch_size >= 2")


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0

    def record(self, step: int, lr: float, loss: float):
        self.steps.append(step)
        self.lrs.append(lr)
        self.losses.append(loss)

    def to_csv(self) -> str:
        lines = ["step,lr,loss"]
        for s, lr, l in zip(self.steps, self.lrs, self.losses):
            lines.append(f"{s},{lr!r},{l!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Batch:
    query_seqs: list[list[int]]
    doc_seqs: list[list[int]]
    doc_keys: list[str]

    def __len__(self) -> int:
        return len(self.doc_keys)


def lr_schedule(step: int, total: int, lr0: float) -> float:
    """Linear decay from lr0 at step 0 to exactly 0 at step == total."""
    if total < 1:
        raise ParameterError(f"total steps must be >= 1, got {total}")
    if not 0 <= step <= total:
        raise ParameterError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 - step / total)


def make_batches(corpus: PairCorpus, batch_size: int, rng: Rng,
                 vocab_size: int) -> Iterator[Batch]:
    """Endless stream of full batches; each epoch is a fresh seeded
    shuffle and the remainder is dropped."""
    n = len(corpus)
    if n < batch_size:
        raise DataError(f"corpus of {n} pairs is smaller than batch size {batch_size}")
    records = corpus.records
    query_seqs = [tokenize(r.query, vocab_size) for r in records]
    doc_seqs = [tokenize(r.doc, vocab_size) for r in records]
    epoch = 0
    while True:
        perm = rng.split(epoch).permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = perm[start:start + batch_size]
            yield Batch(
                query_seqs=[query_seqs[i] for i in idx],
                doc_seqs=[doc_seqs[i] for i in idx],
                doc_keys=[records[i].doc_id for i in idx],
            )
        epoch += 1


class SgdOptimizer:
    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        if lr == 0.0:
            return
        for name in sorted(params):
            params[name] -= lr * grads[name]


class AdamOptimizer:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self._scratch: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        for name in sorted(params):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self._scratch[name] = (np.empty_like(g), np.empty_like(g))
            m, v = self.m[name], self.v[name]
            num, den = self._scratch[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            np.multiply(g, g, out=den)
            v *= self.beta2
            v += (1.0 - self.beta2) * den
            if lr == 0.0:
                continue
            np.multiply(v, 1.0 / (1.0 - self.beta2 ** self.t), out=den)
            np.sqrt(den, out=den)
            den += self.eps
            np.multiply(m, lr / (1.0 - self.beta1 ** self.t), out=num)
            num /= den
            params[name] -= num


def make_optimizer(name: str):
    if name == "sgd":
        return SgdOptimizer()
    if name == "adam":
        return AdamOptimizer()
    raise ParameterError(f"unknown optimizer {name!r}")


def _batch_gradients(params: ModelParams, batch: Batch, loss_cfg: LossConfig):
    """Forward + backward for one batch. Returns (loss, physical grads)."""
    q = encode_batch(params, "query", batch.query_seqs)
    p = encode_batch(params, "doc", batch.doc_seqs)
    sims = similarity_matrices(q, p)
    mask = duplicate_mask(batch.doc_keys) if loss_cfg.mask_duplicate_docs else None
    result = evaluate_loss(sims, loss_cfg, pp_mask=mask)

    q_grads = encode_backward(params, "query", batch.query_seqs, result.grad_q)
    d_grads = encode_backward(params, "doc", batch.doc_seqs, result.grad_p)
    # shared physical parameters accumulate both towers' contributions
    grads: dict[str, np.ndarray] = {}
    for key, arr in zip(params.grad_keys("query"), (q_grads.embed, q_grads.proj)):
        grads[key] = arr
    for key, arr in zip(params.grad_keys("doc"), (d_grads.embed, d_grads.proj)):
        if key in grads:
            grads[key] += arr
        else:
            grads[key] = arr
    return result.loss, grads


def train_step(params: ModelParams, batch: Batch, cfg: TrainConfig, step: int,
               optimizer) -> float:
    """One update at lr_schedule(step). Mutates params in place (aliased
    tables stay aliased) and returns the pre-update loss."""
    loss, grads = _batch_gradients(params, batch, cfg.loss)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {step}")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {name} at step {step}")
    lr = lr_schedule(step, cfg.steps, cfg.lr0)
    optimizer.apply(params.physical(), grads, lr)
    return loss


def train(cfg: TrainConfig, corpus: PairCorpus, model_cfg: TowerConfig,
          checkpoint_cb=None) -> tuple[ModelParams, TrainLog]:
    """Run cfg.steps updates over seeded shuffles of the corpus.

    ``checkpoint_cb(params, step)`` fires every ``checkpoint_every`` steps
    (when nonzero) and always after the final step.
    """
    corpus.validate()
    rng = Rng(cfg.seed)
    params = init_params(model_cfg, rng)
    batches = make_batches(corpus, cfg.batch_size, rng.split("batches"), model_cfg.vocab_size)
    optimizer = make_optimizer(cfg.optimizer)
    logbook = TrainLog()
    started = time.perf_counter()
    for step in range(cfg.steps):
        batch = next(batches)
        loss = train_step(params, batch, cfg, step, optimizer)
        logbook.record(step, lr_schedule(step, cfg.steps, cfg.lr0), loss)
        done = step + 1
        if checkpoint_cb is not None and (
            done == cfg.steps or (cfg.checkpoint_every and done % cfg.checkpoint_every == 0)
        ):
            checkpoint_cb(params, done)
    logbook.wall_seconds = time.perf_counter() - started
    return params, logbook
