"""Dense float64 kernels and the seeded RNG used by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64 and
row-major layout. Public operations validate shapes and reject non-finite
results instead of letting NaNs propagate.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError

__all__ = ["Rng", "as_matrix", "matmul", "l2_normalize_rows", "row_softmax"]


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a float64 2-D array, rejecting non-finite entries."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ShapeError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(m)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit conformance checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    out = a @ b
    if not np.isfinite(out).all():
        raise ShapeError("matmul produced non-finite entries")
    return out


def l2_normalize_rows(m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Scale each row to unit Euclidean norm.

    Rows with norm <= eps cannot be normalized; the error names the first
    offending row.
    """
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1)
    bad = np.flatnonzero(norms <= eps)
    if bad.size:
        raise DegenerateInputError(f"row {bad[0]} has norm {norms[bad[0]]:.3e}, cannot normalize")
    return m / norms[:, None]


def row_softmax(m: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of m / temperature, with max-subtraction so large
    logits (e.g. cosines divided by tau=0.01) never overflow."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    m = as_matrix(m)
    z = m / temperature
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _derive_key(seed: int, path: tuple) -> int:
    """128-bit Philox key from a root seed and a split path."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for label in path:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Deterministic splittable RNG on top of the Philox counter-based
    bit generator.

    The same (seed, split path) always yields the same stream, independent
    of platform and of how many values sibling streams have consumed.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self._path = _path
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(seed, _path)))

    def split(self, label) -> "Rng":
        """Child stream named by ``label``; independent of this stream."""
        return Rng(self.seed, self._path + (label,))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in [low, high), matching numpy's half-open convention."""
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._path})"
