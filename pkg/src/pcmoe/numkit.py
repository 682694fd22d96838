"""Small dense numeric kernels shared by the runtime.

Vectors and matrices are plain float64 numpy arrays. The helpers here add
shape checking and the deterministic tie-breaking the rest of the package
relies on (lowest index wins).
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

MASKED = -np.inf


def as_vector(data) -> np.ndarray:
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    return v


def as_matrix(data) -> np.ndarray:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"expected a non-empty 2-d matrix, got shape {m.shape}")
    return m


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(
            f"dimension mismatch: matrix {m.shape[0]}x{m.shape[1] if m.ndim == 2 else '?'}"
            f" vs vector of dim {v.shape[0] if v.ndim == 1 else v.shape}"
        )
    return m @ v


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax. Entries equal to ``MASKED`` map to exactly 0."""
    z = np.asarray(logits, dtype=np.float64)
    live = z != MASKED
    if not live.any():
        raise ValueError("no unmasked logits")
    out = np.zeros_like(z)
    shifted = z[live] - z[live].max()
    e = np.exp(shifted)
    out[live] = e / e.sum()
    return out


def top_k_indices(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, descending, ties to the lower index."""
    n = len(scores)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} scores")
    # stable sort keeps ascending index order among equal scores
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return [int(i) for i in order[:k]]


def magnitude(x: Iterable[float] | np.ndarray) -> float:
    """Euclidean norm over the flattened entries."""
    a = np.asarray(x, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(a, a)))
