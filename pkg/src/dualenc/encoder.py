"""Two-tower text encoder: hashed tokens, mean pooling, projection, L2 norm.

Three sharing schemes are supported. ``sde`` shares every parameter between
the towers, ``ade`` shares nothing, and ``ade-spl`` shares only the
projection. Sharing is physical: the aliased fields of ``ModelParams`` are
the same ndarray object, so in-place optimizer updates keep the towers
consistent by construction.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, DegenerateInputError, ParameterError, ShapeError
from .numerics import Rng, as_matrix

__all__ = [
    "ARCHITECTURES",
    "MAX_TOKENS",
    "TowerConfig",
    "ModelParams",
    "TowerGrads",
    "tokenize",
    "init_params",
    "encode",
    "encode_batch",
    "encode_backward",
    "save_checkpoint",
    "load_checkpoint",
]

ARCHITECTURES = ("sde", "ade", "ade-spl")
QUERY, DOC = "query", "doc"
MAX_TOKENS = 64

TokenSeq = Sequence[int]


@dataclass(frozen=True)
class TowerConfig:
    architecture: str = "ade-spl"
    vocab_size: int = 4096
    embed_dim: int = 32
    out_dim: int = 32

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ParameterError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        for field in ("vocab_size", "embed_dim", "out_dim"):
            if getattr(self, field) < 1:
                raise ParameterError(f"{field} must be >= 1")


def tokenize(text: str, vocab_size: int) -> list[int]:
    """Hash whitespace tokens of lowercased ``text`` into [0, vocab_size).

    Uses blake2b so ids are stable across platforms and processes (the
    builtin ``hash`` is salted). Sequences are capped at MAX_TOKENS.
    """
    if vocab_size < 1:
        raise ParameterError(f"vocab_size must be >= 1, got {vocab_size}")
    words = text.lower().split()
    if not words:
        raise DataError("cannot tokenize empty or whitespace-only text")
    ids = [_word_id(w) % vocab_size for w in words[:MAX_TOKENS]]
    return ids


def _word_id(word: str) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class ModelParams:
    """Trainable state. Aliased fields share one physical array."""

    config: TowerConfig
    query_embed: np.ndarray
    doc_embed: np.ndarray
    query_proj: np.ndarray
    doc_proj: np.ndarray

    def physical(self) -> dict[str, np.ndarray]:
        """Unique underlying arrays, keyed by canonical name."""
        arch = self.config.architecture
        if arch == "sde":
            return {"embed": self.query_embed, "proj": self.query_proj}
        if arch == "ade-spl":
            return {
                "query_embed": self.query_embed,
                "doc_embed": self.doc_embed,
                "proj": self.query_proj,
            }
        return {
            "query_embed": self.query_embed,
            "doc_embed": self.doc_embed,
            "query_proj": self.query_proj,
            "doc_proj": self.doc_proj,
        }

    def grad_keys(self, tower: str) -> tuple[str, str]:
        """Physical-parameter names (embed, proj) that ``tower`` trains."""
        arch = self.config.architecture
        embed = "embed" if arch == "sde" else f"{tower}_embed"
        proj = "proj" if arch in ("sde", "ade-spl") else f"{tower}_proj"
        return embed, proj

    def validate(self):
        arch = self.config.architecture
        shared_embed = self.query_embed is self.doc_embed
        shared_proj = self.query_proj is self.doc_proj
        if arch == "sde" and not (shared_embed and shared_proj):
            raise ParameterError("sde requires fully shared parameters")
        if arch == "ade-spl" and (shared_embed or not shared_proj):
            raise ParameterError("ade-spl shares exactly the projection")
        if arch == "ade" and (shared_embed or shared_proj):
            raise ParameterError("ade shares no parameters")
        for name, arr in self.physical().items():
            if not np.isfinite(arr).all():
                raise ParameterError(f"parameter {name} contains non-finite entries")


@dataclass
class TowerGrads:
    """Gradients for one tower's embedding table and projection."""

    embed: np.ndarray
    proj: np.ndarray


def init_params(config: TowerConfig, rng: Rng) -> ModelParams:
    """Seeded uniform init on [-1/sqrt(embed_dim), +1/sqrt(embed_dim)].

    Draw order is fixed (query table, doc table, query proj, doc proj) so
    that a given seed produces the same model regardless of architecture
    aliasing decisions made afterwards.
    """
    c = config
    scale = 1.0 / np.sqrt(c.embed_dim)
    r = rng.split("init")

    def draw(label, shape):
        return r.split(label).uniform(-scale, scale, shape)

    q_embed = draw("query_embed", (c.vocab_size, c.embed_dim))
    d_embed = draw("doc_embed", (c.vocab_size, c.embed_dim))
    q_proj = draw("query_proj", (c.embed_dim, c.out_dim))
    d_proj = draw("doc_proj", (c.embed_dim, c.out_dim))

    if c.architecture == "sde":
        d_embed, d_proj = q_embed, q_proj
    elif c.architecture == "ade-spl":
        d_proj = q_proj
    return ModelParams(c, q_embed, d_embed, q_proj, d_proj)


def _tower_tables(params: ModelParams, tower: str) -> tuple[np.ndarray, np.ndarray]:
    if tower == QUERY:
        return params.query_embed, params.query_proj
    if tower == DOC:
        return params.doc_embed, params.doc_proj
    raise ParameterError(f"tower must be 'query' or 'doc', got {tower!r}")


def _check_tokens(tokens: TokenSeq, vocab_size: int):
    if len(tokens) == 0:
        raise DataError("token sequence is empty")
    for t in tokens:
        if not 0 <= t < vocab_size:
            raise DataError(f"token id {t} outside vocab of size {vocab_size}")


def _flatten_seqs(seqs: Sequence[TokenSeq], vocab_size: int):
    """Concatenate sequences for segment ops; returns (flat ids, row of
    each flat id, per-row lengths)."""
    lengths = np.empty(len(seqs), dtype=np.intp)
    for i, seq in enumerate(seqs):
        if len(seq) == 0:
            raise DataError(f"row {i}: token sequence is empty")
        lengths[i] = len(seq)
    flat = np.concatenate([np.asarray(s, dtype=np.intp) for s in seqs])
    if flat.size and (flat.min() < 0 or flat.max() >= vocab_size):
        bad = flat[(flat < 0) | (flat >= vocab_size)][0]
        raise DataError(f"token id {bad} outside vocab of size {vocab_size}")
    rows = np.repeat(np.arange(len(seqs), dtype=np.intp), lengths)
    return flat, rows, lengths


def _forward_batch(params: ModelParams, tower: str, seqs: Sequence[TokenSeq]):
    """Mean-pool, project, normalize for a whole batch. Returns the
    intermediates (pooled, pre-norm rows, norms, unit rows) that the
    backward pass reuses."""
    embed, proj = _tower_tables(params, tower)
    flat, rows, lengths = _flatten_seqs(seqs, params.config.vocab_size)
    pooled = np.zeros((len(seqs), embed.shape[1]))
    np.add.at(pooled, rows, embed[flat])
    pooled /= lengths[:, None]
    z = pooled @ proj
    norms = np.linalg.norm(z, axis=1)
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        raise DegenerateInputError(
            f"row {bad[0]}: pre-normalization norm {norms[bad[0]]:.3e} is degenerate"
        )
    return pooled, z, norms, z / norms[:, None]


def encode(params: ModelParams, tower: str, tokens: TokenSeq) -> np.ndarray:
    """Mean-pool token embeddings, project, L2-normalize. Returns (out_dim,)."""
    _check_tokens(tokens, params.config.vocab_size)
    return _forward_batch(params, tower, [tokens])[3][0]


def encode_batch(params: ModelParams, tower: str, seqs: Sequence[TokenSeq]) -> np.ndarray:
    """Encode seqs into a (B, out_dim) matrix; row i == encode(seqs[i])."""
    if len(seqs) < 1:
        raise ShapeError("encode_batch needs at least one sequence")
    return _forward_batch(params, tower, seqs)[3]


def encode_backward(
    params: ModelParams,
    tower: str,
    seqs: Sequence[TokenSeq],
    grad_embeddings: np.ndarray,
) -> TowerGrads:
    """Chain upstream gradients w.r.t. the normalized embeddings back to
    this tower's embedding table and projection.

    Accumulation is segment-wise in flat token order, a fixed reduction
    order, so results are deterministic.
    """
    embed, proj = _tower_tables(params, tower)
    g_out = as_matrix(grad_embeddings, "grad_embeddings")
    if g_out.shape != (len(seqs), params.config.out_dim):
        raise ShapeError(
            f"grad_embeddings shape {g_out.shape} != ({len(seqs)}, {params.config.out_dim})"
        )
    flat, rows, lengths = _flatten_seqs(seqs, params.config.vocab_size)
    pooled, _, norms, y = _forward_batch(params, tower, seqs)
    gz = (g_out - (g_out * y).sum(axis=1, keepdims=True) * y) / norms[:, None]
    g_proj = pooled.T @ gz
    gh = (gz @ proj.T) / lengths[:, None]
    g_embed = np.zeros_like(embed)
    np.add.at(g_embed, flat, gh[rows])
    return TowerGrads(embed=g_embed, proj=g_proj)


CHECKPOINT_FORMAT = "dualenc-checkpoint-v1"


def save_checkpoint(path, params: ModelParams, seed: int, step: int):
    """Write a single JSON checkpoint atomically (temp file + rename)."""
    params.validate()
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": {
            "architecture": params.config.architecture,
            "vocab_size": params.config.vocab_size,
            "embed_dim": params.config.embed_dim,
            "out_dim": params.config.out_dim,
        },
        "seed": int(seed),
        "step": int(step),
        "params": {name: arr.tolist() for name, arr in params.physical().items()},
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, int, int]:
    """Read a checkpoint and restore architecture-correct aliasing."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"not a checkpoint file: {path}")
    config = TowerConfig(**doc["config"])
    mats = {name: np.asarray(vals, dtype=np.float64) for name, vals in doc["params"].items()}
    if config.architecture == "sde":
        params = ModelParams(config, mats["embed"], mats["embed"], mats["proj"], mats["proj"])
    elif config.architecture == "ade-spl":
        params = ModelParams(config, mats["query_embed"], mats["doc_embed"], mats["proj"], mats["proj"])
    else:
        params = ModelParams(
            config, mats["query_embed"], mats["doc_embed"], mats["query_proj"], mats["doc_proj"]
        )
    params.validate()
    return params, int(doc["seed"]), int(doc["step"])


def atomic_write_text(path, text: str):
    """Write text to ``path`` via a temp file in the same directory."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
