"""Small deterministic numeric kernels shared by every other module.

Vectors and matrices are plain ``numpy.float64`` arrays (1-D and 2-D,
row-major). The helpers here validate shapes/finiteness and pin down the
behaviours that matter for reproducible routing: stable softmax, top-k with
lowest-index tie-breaking, fixed-order matvec and a seeded Gaussian source.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Rng",
    "as_vector",
    "as_matrix",
    "softmax",
    "softmax_rows",
    "topk",
    "topk_rows",
    "matvec",
    "gaussian",
]

_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def as_vector(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("vector has non-finite entries")
    return a


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def softmax(v) -> np.ndarray:
    """Softmax of a single vector, computed after subtracting the max."""
    a = as_vector(v)
    e = np.exp(a - a.max())
    return e / e.sum()


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax for a (batch, n) array."""
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def topk(v, k: int) -> list[int]:
    """Indices of the ``k`` largest entries, largest first.

    Equal values are ordered by ascending index, so ``topk([0.5, 0.5, 0], 1)``
    is ``[0]``.
    """
    a = as_vector(v)
    if not 1 <= k <= a.size:
        raise ValueError(f"k={k} out of range for vector of length {a.size}")
    # stable sort on the negated values keeps lower indices first among ties
    order = np.argsort(-a, kind="stable")
    return [int(i) for i in order[:k]]


def topk_rows(x: np.ndarray, k: int) -> np.ndarray:
    """Batched :func:`topk` over the last axis; returns an int array (..., k)."""
    if not 1 <= k <= x.shape[-1]:
        raise ValueError(f"k={k} out of range for last axis of size {x.shape[-1]}")
    return np.argsort(-x, axis=-1, kind="stable")[..., :k]


def matvec(m, v) -> np.ndarray:
    """Matrix-vector product with a fixed left-to-right summation order.

    Column ``j`` is accumulated into the running sum before column ``j + 1``,
    independent of any BLAS blocking.
    """
    a = as_matrix(m)
    x = as_vector(v)
    if a.shape[1] != x.size:
        raise ValueError(f"dimension mismatch: matrix {a.shape} times vector ({x.size},)")
    out = np.zeros(a.shape[0])
    for j in range(a.shape[1]):
        out += a[:, j] * x[j]
    return out


class Rng:
    """Seeded Philox-4x64-10 stream with Box-Muller normals.

    Bit-level definition:

    * The counter-based generator is Philox-4x64 with 10 rounds, keyed by the
      two 64-bit words ``(seed, stream)`` and starting at counter 0
      (``numpy.random.Philox(key=[seed, stream])``). Each call to
      ``random_raw`` yields the next 64-bit output word.
    * A uniform double is ``(word >> 11) * 2**-53`` in ``[0, 1)``.
    * Normals are produced in pairs from consecutive uniforms ``u1, u2``:
      ``r = sqrt(-2 ln(1 - u1))``, ``z0 = r cos(2 pi u2)``,
      ``z1 = r sin(2 pi u2)``. For odd ``n`` the trailing ``z1`` is discarded.

    ``child(i)`` gives an independent stream keyed ``(seed, mix(stream, i))``.
    An Rng instance is single-owner mutable state.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= seed < 2**64 or not 0 <= stream < 2**64:
            raise ValueError("seed and stream must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream = int(stream)
        self._bits = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def child(self, index: int) -> "Rng":
        # splitmix64 finaliser over (stream, index) so children of different
        # streams never collide in practice
        z = (self.stream * 0x9E3779B97F4A7C15 + index + 1) % 2**64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
        z ^= z >> 31
        return Rng(self.seed, z)

    def uniform(self, n: int) -> np.ndarray:
        words = self._bits.random_raw(n)
        return (words >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers uniform on ``[0, high)`` (floor of ``uniform * high``)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(_TWO_PI * u2)
        z[1::2] = r * np.sin(_TWO_PI * u2)
        return z[:n]


def gaussian(rng: Rng, n: int) -> np.ndarray:
    """``n`` standard normal draws from ``rng``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.normal(n)
