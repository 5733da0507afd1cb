"""Compressed sparse row matrices used as constant operators.

Laplacians and the pooling/unpooling transforms never receive gradients,
so they live outside the tape.  Products are delegated to scipy's CSR
kernels; the public surface is the plain offsets/indices/values triple.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse


class SparseMatrix:
    """Immutable CSR matrix.

    Column indices are strictly increasing within each row and the last
    offset equals the number of stored values.
    """

    __slots__ = ("n_rows", "n_cols", "offsets", "indices", "values", "_csr", "_csr_t")

    def __init__(self, n_rows, n_cols, offsets, indices, values):
        offsets = np.asarray(offsets, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        n_rows, n_cols = int(n_rows), int(n_cols)
        if offsets.shape != (n_rows + 1,):
            raise ValueError(f"offsets must have length n_rows+1={n_rows + 1}, got {offsets.shape}")
        if offsets[0] != 0 or np.any(np.diff(offsets) < 0):
            raise ValueError("offsets must start at 0 and be non-decreasing")
        if offsets[-1] != len(indices) or len(indices) != len(values):
            raise ValueError("last offset must equal the number of stored values")
        if len(indices) and (indices.min() < 0 or indices.max() >= n_cols):
            raise ValueError("column index out of range")
        # strictly increasing columns inside every row
        if len(indices) > 1:
            steps = np.diff(indices)
            row_start = np.zeros(len(indices), dtype=bool)
            row_start[offsets[:-1][offsets[:-1] < len(indices)]] = True
            if np.any((steps <= 0) & ~row_start[1:]):
                raise ValueError("column indices must be strictly increasing within each row")
        if not np.all(np.isfinite(values)):
            raise ValueError("sparse values must be finite")
        for arr in (offsets, indices, values):
            arr.flags.writeable = False
        self.n_rows, self.n_cols = n_rows, n_cols
        self.offsets, self.indices, self.values = offsets, indices, values
        self._csr = scipy.sparse.csr_matrix((values, indices, offsets), shape=(n_rows, n_cols))
        self._csr_t = None

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return len(self.values)

    @classmethod
    def from_scipy(cls, mat) -> "SparseMatrix":
        csr = scipy.sparse.csr_matrix(mat, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.shape[0], csr.shape[1], csr.indptr, csr.indices, csr.data)

    @classmethod
    def from_coo(cls, rows, cols, values, shape) -> "SparseMatrix":
        """Build from triplets; duplicate entries are summed."""
        return cls.from_scipy(scipy.sparse.coo_matrix((values, (rows, cols)), shape=shape))

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        return cls.from_scipy(scipy.sparse.csr_matrix(np.asarray(dense, dtype=np.float64)))

    @classmethod
    def identity(cls, n) -> "SparseMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def to_scipy(self):
        return self._csr

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self._csr.T)

    def linear_combination(self, a, other: "SparseMatrix", b) -> "SparseMatrix":
        """Return ``a*self + b*other``."""
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        return SparseMatrix.from_scipy(a * self._csr + b * other._csr)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self._csr.sum(axis=1)).ravel()

    def is_symmetric(self, atol=0.0) -> bool:
        if self.n_rows != self.n_cols:
            return False
        diff = (self._csr - self._csr.T).tocoo()
        return diff.nnz == 0 or float(np.max(np.abs(diff.data), initial=0.0)) <= atol

    def dot(self, x: np.ndarray) -> np.ndarray:
        """Apply to a dense array whose leading (or second, for 3-D batches) axis has n_cols rows."""
        return _apply(self._csr, self.n_cols, x)

    def dot_transposed(self, x: np.ndarray) -> np.ndarray:
        if self._csr_t is None:
            self._csr_t = self._csr.T.tocsr()
        return _apply(self._csr_t, self.n_rows, x)

    def __repr__(self):
        return f"SparseMatrix({self.n_rows}x{self.n_cols}, nnz={self.nnz})"


def _apply(csr, inner, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim in (1, 2):
        if x.shape[0] != inner:
            raise ValueError(f"shape mismatch: sparse expects {inner} rows, got {x.shape}")
        return np.asarray(csr @ x)
    if x.ndim == 3:
        # (B, k, n) batch: fold the batch into columns
        b, k, n = x.shape
        if k != inner:
            raise ValueError(f"shape mismatch: sparse expects {inner} rows, got {x.shape}")
        folded = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(k, b * n)
        out = np.asarray(csr @ folded)
        return np.ascontiguousarray(out.reshape(csr.shape[0], b, n).transpose(1, 0, 2))
    raise ValueError(f"unsupported operand rank {x.ndim}")


def power_iteration(s: SparseMatrix, iters=100, seed=0, tol=1e-9, fallback=None):
    """Largest-magnitude eigenvalue estimate of a symmetric matrix.

    Returns the Rayleigh quotient after ``iters`` multiplications from a
    seeded random start.  When ``fallback`` is given and the final residual
    ``||S x - lam x|| / max(1, |lam|)`` exceeds ``tol``, ``fallback`` is
    returned instead.
    """
    if s.n_rows != s.n_cols:
        raise ValueError(f"power_iteration needs a square matrix, got {s.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n = s.n_rows
    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = s.dot(x)
        lam = float(x @ y)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        x = y / norm
    residual = np.linalg.norm(s.dot(x) - (x @ s.dot(x)) * x)
    lam = float(x @ s.dot(x))
    if fallback is not None and residual > tol * max(1.0, abs(lam)):
        return float(fallback)
    return lam
