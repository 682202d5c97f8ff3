"""Canonical scaled dot-product attention, row softmax, masks, and the
score-element counter shared by every attention variant."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    _record,
    accumulate_grad,
    concat_cols,
    matmul,
    multiply,
    slice_cols,
    transpose,
)


class OpCounter:
    """Tracks attention cost in score elements.

    score_elements: cumulative count of score-matrix entries computed (one
    entry = one d-length query-key dot product).  peak_score_buffer: the
    largest score matrix alive at once; score matrices are materialized one
    at a time, so this is the max of the per-call sizes.
    """

    def __init__(self):
        self.score_elements = 0
        self.peak_score_buffer = 0

    def add_scores(self, rows: int, cols: int) -> None:
        n = rows * cols
        self.score_elements += n
        if n > self.peak_score_buffer:
            self.peak_score_buffer = n

    def reset(self) -> None:
        self.score_elements = 0
        self.peak_score_buffer = 0


class AttentionMask:
    """Which score entries may carry weight (True = attend).

    Kinds: none (full attention), causal (no looking ahead), key_padding
    (keys at index >= valid_len excluded), or a custom boolean matrix.
    A masked position gets exactly zero weight after softmax; a fully
    masked row yields an all-zero output row.
    """

    def __init__(self, kind: str, valid_len: int = 0,
                 matrix: Optional[np.ndarray] = None):
        self.kind = kind
        self.valid_len = valid_len
        self._matrix = matrix

    @classmethod
    def none(cls) -> "AttentionMask":
        return cls("none")

    @classmethod
    def causal(cls) -> "AttentionMask":
        return cls("causal")

    @classmethod
    def key_padding(cls, valid_len: int) -> "AttentionMask":
        return cls("key_padding", valid_len=valid_len)

    @classmethod
    def custom(cls, matrix: np.ndarray) -> "AttentionMask":
        return cls("custom", matrix=np.asarray(matrix, dtype=bool))

    def matrix(self, n_q: int, n_k: int) -> Optional[np.ndarray]:
        """Boolean allow-matrix of shape (n_q, n_k), or None for no mask."""
        if self.kind == "none":
            return None
        if self.kind == "causal":
            return np.tril(np.ones((n_q, n_k), dtype=bool))
        if self.kind == "key_padding":
            m = np.zeros((n_q, n_k), dtype=bool)
            m[:, :max(self.valid_len, 0)] = True
            return m
        if self._matrix.shape != (n_q, n_k):
            raise DimensionError(
                f"custom mask shape {self._matrix.shape} != scores ({n_q}, {n_k})")
        return self._matrix

    def combined_with(self, other: "AttentionMask", n_q: int, n_k: int) -> "AttentionMask":
        a, b = self.matrix(n_q, n_k), other.matrix(n_q, n_k)
        if a is None:
            return other
        if b is None:
            return self
        return AttentionMask.custom(a & b)


def row_softmax(scores: Tensor, mask: AttentionMask) -> Tensor:
    """Row-wise softmax with max-subtraction; masked entries are exactly 0
    and fully masked rows come out all-zero."""
    if scores.data.ndim != 2:
        raise DimensionError(f"row_softmax expects a matrix, got {scores.shape}")
    allow = mask.matrix(*scores.shape)
    s = scores.data
    if allow is None:
        e = np.exp(s - s.max(axis=1, keepdims=True))
    else:
        masked = np.where(allow, s, -np.inf)
        row_max = masked.max(axis=1, keepdims=True)
        # rows with no allowed entry: shift by 0; exp(-inf) underflows to
        # exactly 0, which is what the mask contract wants
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.exp(masked - row_max)
    denom = e.sum(axis=1, keepdims=True)
    safe = np.where(denom > 0.0, denom, 1.0)
    p = e / safe
    out = Tensor(p)

    def backward():
        if out.grad is None:
            return
        g = out.grad
        # dS = P * (G - sum_j G_j P_j); exact zeros in P kill masked entries
        inner = (g * p).sum(axis=1, keepdims=True)
        accumulate_grad(scores, p * (g - inner))

    return _record("row_softmax", out, (scores,), backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask,
                         counter: OpCounter) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d)) V; adds one score element per query-key pair
    to the counter.  Fully differentiable."""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(
            f"attention: feature dims differ: Q {q.shape} vs K {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(
            f"attention: key/value lengths differ: K {k.shape} vs V {v.shape}")
    d = q.shape[1]
    counter.add_scores(q.shape[0], k.shape[0])
    scores = multiply(matmul(q, transpose(k)), 1.0 / np.sqrt(d))
    weights = row_softmax(scores, mask)
    return matmul(weights, v)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: AttentionMask, counter: OpCounter) -> Tensor:
    """Slice the feature dim into contiguous head slabs, run the kernel per
    slab, and concatenate the slab outputs."""
    d = q.shape[1]
    if d % heads != 0:
        raise DimensionError(f"feature dim {d} not divisible by {heads} heads")
    if heads == 1:
        return scaled_dot_attention(q, k, v, mask, counter)
    dh = d // heads
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        outs.append(scaled_dot_attention(
            slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi),
            mask, counter))
    return concat_cols(outs)
