"""Small dense linear-algebra helpers shared by the solver modules."""

from __future__ import annotations

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

_DENSE_NORM_LIMIT = 600


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def _start_vector(n: int) -> np.ndarray:
    return np.random.default_rng(12345).standard_normal(n)


def sym_norm(A: np.ndarray) -> float:
    """Spectral norm of a symmetric matrix."""
    n = A.shape[0]
    if n <= _DENSE_NORM_LIMIT:
        return float(np.max(np.abs(np.linalg.eigvalsh(symmetrize(A))))) if n else 0.0
    if not np.any(A):
        return 0.0
    vals = eigsh(A, k=1, which="LM", v0=_start_vector(n), tol=1e-6, return_eigenvectors=False)
    return float(abs(vals[0]))


def op_norm(A: np.ndarray) -> float:
    """Spectral norm of a general (possibly rectangular) matrix."""
    m, n = A.shape
    if min(m, n) <= _DENSE_NORM_LIMIT:
        return float(np.linalg.norm(A, 2)) if A.size else 0.0
    if not np.any(A):
        return 0.0
    gram = LinearOperator((n, n), matvec=lambda v: A.T @ (A @ v), dtype=float)
    vals = eigsh(gram, k=1, which="LM", v0=_start_vector(n), tol=1e-6, return_eigenvectors=False)
    return float(np.sqrt(abs(vals[0])))


def block_left(blocks: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``blockdiag(blocks) @ X`` for a stack of ``(n, b, b)`` blocks."""
    n, b, _ = blocks.shape
    Y = np.matmul(blocks, X.reshape(n, b, -1))
    return Y.reshape(X.shape)


def block_right(X: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """``X @ blockdiag(blocks)``."""
    return block_left(blocks.transpose(0, 2, 1), X.T).T


def block_dense(blocks: np.ndarray) -> np.ndarray:
    n, b, _ = blocks.shape
    out = np.zeros((n * b, n * b))
    for i in range(n):
        out[i * b : (i + 1) * b, i * b : (i + 1) * b] = blocks[i]
    return out
