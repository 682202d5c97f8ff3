"""Compressed cross-attention: the encoder output is linearly compressed
to a fixed row count before serving as keys/values, so cross-attention
cost is l_dec * l_comp no matter how long the encoder sequence gets.
Each decoder layer owns its own compression matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionMask, OpCounter, multi_head_attention
from .tensor import DimensionError, Tensor, broadcast_add, matmul


@dataclass
class CcaLayerParams:
    """Per-decoder-layer compression matrix plus Q/K/V/output projections.

    c is l_comp-by-l_enc and is never shared between layers."""

    c: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor
    b_k: Tensor
    b_v: Tensor
    b_o: Tensor

    @classmethod
    def init(cls, d: int, l_enc: int, l_comp: int,
             rng: np.random.Generator) -> "CcaLayerParams":
        def proj():
            a = 1.0 / math.sqrt(d)
            return Tensor(rng.uniform(-a, a, size=(d, d)), requires_grad=True)

        def bias():
            return Tensor(np.zeros((1, d)), requires_grad=True)

        scale = 1.0 / math.sqrt(l_enc)
        return cls(
            c=Tensor(rng.uniform(-scale, scale, size=(l_comp, l_enc)),
                     requires_grad=True),
            w_q=proj(), w_k=proj(), w_v=proj(), w_o=proj(),
            b_q=bias(), b_k=bias(), b_v=bias(), b_o=bias(),
        )

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}c": self.c,
            f"{prefix}w_q": self.w_q, f"{prefix}w_k": self.w_k,
            f"{prefix}w_v": self.w_v, f"{prefix}w_o": self.w_o,
            f"{prefix}b_q": self.b_q, f"{prefix}b_k": self.b_k,
            f"{prefix}b_v": self.b_v, f"{prefix}b_o": self.b_o,
        }


def compress_encoder_output(h_enc: Tensor, c: Tensor) -> Tensor:
    """C @ H_enc, shrinking l_enc rows to l_comp.  When the encoder output
    is already no longer than l_comp, compression is pointless and the
    input passes through unchanged."""
    l_comp = c.shape[0]
    if h_enc.shape[0] <= l_comp:
        return h_enc
    if c.shape[1] != h_enc.shape[0]:
        raise DimensionError(
            f"compression matrix {c.shape} incompatible with encoder output {h_enc.shape}")
    return matmul(c, h_enc)


def cca_op_count(l_dec: int, l_enc: int, l_comp: int, heads: int = 1) -> int:
    """Closed-form score-element count: l_dec keys per query after
    compression, per head."""
    return heads * l_dec * min(l_enc, l_comp)


def cca_forward(h_dec: Tensor, h_enc: Tensor, params: CcaLayerParams,
                counter: OpCounter, heads: int = 1) -> Tensor:
    """Queries from the decoder stream; keys/values projected from the
    compressed encoder output; canonical attention; output projection.

    No mask: compressed rows are mixtures of all encoder positions, so a
    key-padding mask has nothing to point at.
    """
    q = broadcast_add(matmul(h_dec, params.w_q), params.b_q)
    h_c = compress_encoder_output(h_enc, params.c)
    k = broadcast_add(matmul(h_c, params.w_k), params.b_k)
    v = broadcast_add(matmul(h_c, params.w_v), params.b_v)
    attended = multi_head_attention(q, k, v, heads, AttentionMask.none(), counter)
    return broadcast_add(matmul(attended, params.w_o), params.b_o)
