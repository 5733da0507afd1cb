"""Chebyshev spectral graph convolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .sparse import SparseMatrix

DEFAULT_ORDER = 6


def scale_laplacian(lap: SparseMatrix, lambda_max: float) -> SparseMatrix:
    """``(2 / lambda_max) * lap - I``, mapping the spectrum into [-1, 1]."""
    if not lambda_max > 0:
        raise ValueError(f"lambda_max must be positive, got {lambda_max}")
    return lap.linear_combination(2.0 / lambda_max, SparseMatrix.identity(lap.n_rows), -1.0)


def cheb_poly_scalar(k: int, x: float) -> float:
    if k < 0:
        raise ValueError("order must be non-negative")
    prev, cur = 1.0, x
    if k == 0:
        return prev
    for _ in range(k - 1):
        prev, cur = cur, 2.0 * x * cur - prev
    return cur


def chebyshev_basis(lap: SparseMatrix, x, order):
    """Recurrence terms ``[T_0(L) x, ..., T_{order-1}(L) x]`` as tensors."""
    terms = [x]
    if order > 1:
        terms.append(T.sparse_matmul(lap, x))
    for _ in range(2, order):
        terms.append(T.scale(T.sparse_matmul(lap, terms[-1]), 2.0) - terms[-2])
    return terms


@dataclass
class ChebConvLayer:
    theta: T.Tensor  # (K, F_in, F_out)
    bias: T.Tensor  # (F_out,)

    @property
    def order(self):
        return self.theta.shape[0]

    @property
    def f_in(self):
        return self.theta.shape[1]

    @property
    def f_out(self):
        return self.theta.shape[2]

    @classmethod
    def init(cls, f_in, f_out, order=DEFAULT_ORDER, rng=None):
        rng = np.random.default_rng(rng)
        bound = np.sqrt(6.0 / (order * f_in + f_out))
        theta = rng.uniform(-bound, bound, size=(order, f_in, f_out))
        return cls(T.Tensor(theta, requires_grad=True), T.Tensor(np.zeros(f_out), requires_grad=True))


def cheb_conv(lap: SparseMatrix, x, layer: ChebConvLayer):
    """Filter node features ``x`` ((N, F_in) or a (B, N, F_in) batch) with the layer.

    Computes ``sum_k T_k(lap) x theta_k + bias`` via the three-term recurrence.
    """
    x = T.as_tensor(x)
    k, f_in, f_out = layer.theta.shape
    if x.shape[-1] != f_in or x.shape[-2] != lap.n_cols:
        raise ValueError(f"cheb_conv shape mismatch: input {x.shape}, laplacian {lap.shape}, F_in={f_in}")
    terms = chebyshev_basis(lap, x, k)
    stacked = terms[0] if k == 1 else T.concat(terms, axis=-1)
    weights = T.reshape(layer.theta, (k * f_in, f_out))
    return T.matmul(stacked, weights) + layer.bias
