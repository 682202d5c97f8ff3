"""Grouped self-attention: local attention inside fixed-size groups plus a
global pass over per-group summary nodes, merged with learnable per-group
scalars.

The sequence is cut into m = ceil(l / l_g) groups, zero-padding the tail.
Each group attends within itself.  When the global path is on, every group
is projected down to l_s summary rows; the m*l_s summary rows attend to
each other, each group's summary output is average-pooled to one row, and
that row is blended back into the group's local output as
alpha_j * local + beta_j * pooled.  Score-element cost per head is
m*l_g^2 + (m*l_s)^2, linear in l for fixed l_g and l_s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import AttentionMask, OpCounter, scaled_dot_attention
from .tensor import (
    DimensionError,
    Tensor,
    broadcast_add,
    concat_cols,
    concat_rows,
    matmul,
    mean_rows,
    multiply,
    pad_rows,
    slice_cols,
    slice_rows,
    sum_rows,
)


class ConfigError(ValueError):
    """Invalid layer or model configuration."""


class LengthError(ValueError):
    """Sequence longer than the configured maximum."""


@dataclass
class GsaConfig:
    l_g: int                    # group node length
    l_s: int                    # summarized node length
    d: int                      # model feature dimension
    heads: int
    m_max: int                  # group count at the configured max length
    causal: bool = False
    global_path: bool = True    # False reproduces the local-only ablation
    pool_mode: str = "mean"     # "mean" (default) or "sum" summary pooling
    merge_per_group: bool = True  # False: one alpha/beta shared by all groups

    def __post_init__(self):
        if self.l_g <= 0 or self.l_s <= 0:
            raise ConfigError(f"group lengths must be positive: l_g={self.l_g}, l_s={self.l_s}")
        if self.l_s >= self.l_g:
            raise ConfigError(f"l_s must be < l_g, got l_s={self.l_s}, l_g={self.l_g}")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.m_max <= 0:
            raise ConfigError(f"m_max must be positive, got {self.m_max}")
        if self.pool_mode not in ("mean", "sum"):
            raise ConfigError(f"pool_mode must be 'mean' or 'sum', got {self.pool_mode!r}")

    @property
    def uses_global(self) -> bool:
        # group summaries mix future positions inside the group, so the
        # global path would leak under a causal mask
        return self.global_path and not self.causal


@dataclass
class GsaLayerParams:
    """All learnable state of one grouped self-attention layer.

    The summary projections e_q/e_k/e_v are single tensors applied to every
    group (shared weights); alpha/beta hold one merge scalar per group slot.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor
    b_k: Tensor
    b_v: Tensor
    b_o: Tensor
    e_q: Tensor
    e_k: Tensor
    e_v: Tensor
    alpha: Tensor
    beta: Tensor

    @classmethod
    def init(cls, cfg: GsaConfig, rng: np.random.Generator) -> "GsaLayerParams":
        def proj():
            a = 1.0 / math.sqrt(cfg.d)
            return Tensor(rng.uniform(-a, a, size=(cfg.d, cfg.d)), requires_grad=True)

        def bias():
            return Tensor(np.zeros((1, cfg.d)), requires_grad=True)

        def summary():
            a = 1.0 / math.sqrt(cfg.l_g)
            return Tensor(rng.uniform(-a, a, size=(cfg.l_s, cfg.l_g)), requires_grad=True)

        # alpha=1, beta=0: the layer starts as pure local attention and the
        # gradient to beta is already nonzero, so the global path can learn on
        n_merge = cfg.m_max if cfg.merge_per_group else 1
        return cls(
            w_q=proj(), w_k=proj(), w_v=proj(), w_o=proj(),
            b_q=bias(), b_k=bias(), b_v=bias(), b_o=bias(),
            e_q=summary(), e_k=summary(), e_v=summary(),
            alpha=Tensor(np.ones((1, n_merge)), requires_grad=True),
            beta=Tensor(np.zeros((1, n_merge)), requires_grad=True),
        )

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}w_q": self.w_q, f"{prefix}w_k": self.w_k,
            f"{prefix}w_v": self.w_v, f"{prefix}w_o": self.w_o,
            f"{prefix}b_q": self.b_q, f"{prefix}b_k": self.b_k,
            f"{prefix}b_v": self.b_v, f"{prefix}b_o": self.b_o,
            f"{prefix}e_q": self.e_q, f"{prefix}e_k": self.e_k,
            f"{prefix}e_v": self.e_v,
            f"{prefix}alpha": self.alpha, f"{prefix}beta": self.beta,
        }


def partition_groups(x: Tensor, l_g: int) -> tuple[list[Tensor], int, int]:
    """Cut x into m = ceil(l / l_g) groups of l_g rows, zero-padding the
    tail; concatenating the groups and dropping the pad recovers x."""
    if l_g <= 0:
        raise ConfigError(f"l_g must be positive, got {l_g}")
    l = x.shape[0]
    m = math.ceil(l / l_g)
    pad = m * l_g - l
    padded = pad_rows(x, m * l_g)
    groups = [slice_rows(padded, j * l_g, (j + 1) * l_g) for j in range(m)]
    return groups, m, pad


def summarize_group(q_g: Tensor, k_g: Tensor, v_g: Tensor,
                    e_q: Tensor, e_k: Tensor, e_v: Tensor,
                    ) -> tuple[Tensor, Tensor, Tensor]:
    """Project a group's l_g rows down to l_s summary rows per stream."""
    if e_q.shape[1] != q_g.shape[0]:
        raise DimensionError(
            f"summary projection {e_q.shape} incompatible with group {q_g.shape}")
    return matmul(e_q, q_g), matmul(e_k, k_g), matmul(e_v, v_g)


def global_summary_attention(q_cat: Tensor, k_cat: Tensor, v_cat: Tensor,
                             l_s: int, counter: OpCounter) -> Tensor:
    """Canonical attention over all concatenated summary rows; the caller
    splits the result back into m segments of l_s rows."""
    if q_cat.shape[0] % l_s != 0:
        raise DimensionError(
            f"summary row count {q_cat.shape[0]} not divisible by l_s={l_s}")
    return scaled_dot_attention(q_cat, k_cat, v_cat, AttentionMask.none(), counter)


def _pool(seg: Tensor, pool_mode: str) -> Tensor:
    return mean_rows(seg) if pool_mode == "mean" else sum_rows(seg)


def merge_outputs(o_local: Tensor, o_summary_segment: Tensor,
                  alpha_j, beta_j, pool_mode: str = "mean") -> Tensor:
    """alpha_j * local output + beta_j * pooled summary row, the pooled row
    broadcast onto every group row.  alpha_j/beta_j may be 1x1 tensors
    (learnable) or plain floats."""
    pooled = _pool(o_summary_segment, pool_mode)
    return broadcast_add(multiply(o_local, alpha_j), multiply(pooled, beta_j))


def gsa_op_count(l: int, l_g: int, l_s: int, global_path: bool = True) -> int:
    """Closed-form score-element count for one head: m*l_g^2 plus, with the
    global path on, (m*l_s)^2."""
    if l <= 0 or l_g <= 0 or l_s <= 0:
        raise ConfigError(f"lengths must be positive: l={l}, l_g={l_g}, l_s={l_s}")
    m = math.ceil(l / l_g)
    count = m * l_g * l_g
    if global_path:
        count += (m * l_s) ** 2
    return count


def gsa_forward(x: Tensor, params: GsaLayerParams, cfg: GsaConfig,
                counter: OpCounter, real_len: Optional[int] = None) -> Tensor:
    """One grouped self-attention layer over an l-by-d sequence.

    Rows at index >= real_len (default: all rows real) are padding: their
    projected queries/keys/values are zeroed and they are masked out as
    keys, so outputs at real positions never depend on pad values.
    """
    l, d = x.shape
    if d != cfg.d:
        raise DimensionError(f"input dim {d} != configured d {cfg.d}")
    if l > cfg.m_max * cfg.l_g:
        raise LengthError(
            f"sequence length {l} exceeds configured maximum {cfg.m_max * cfg.l_g}")
    if real_len is None:
        real_len = l
    if not 1 <= real_len <= l:
        raise LengthError(f"real_len {real_len} outside [1, {l}]")
    m = math.ceil(real_len / cfg.l_g)
    padded_len = m * cfg.l_g
    if l > padded_len:
        # extra whole groups of padding would change the group layout (and
        # add all-zero summary rows to the global pass); only completing
        # the final group is allowed
        raise LengthError(
            f"{l} rows with real_len {real_len} spans more than the "
            f"{m} groups the real rows occupy")

    q = broadcast_add(matmul(x, params.w_q), params.b_q)
    k = broadcast_add(matmul(x, params.w_k), params.b_k)
    v = broadcast_add(matmul(x, params.w_v), params.b_v)
    if real_len < padded_len:
        # pad rows picked up the projection bias (and any garbage the caller
        # left beyond real_len); zero them before anything downstream
        keep = np.zeros((l, d))
        keep[:real_len] = 1.0
        keep_t = Tensor(keep)
        q, k, v = multiply(q, keep_t), multiply(k, keep_t), multiply(v, keep_t)

    dh = d // cfg.heads
    use_global = cfg.uses_global
    head_outs = []
    for h in range(cfg.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_cols(q, lo, hi) if cfg.heads > 1 else q
        kh = slice_cols(k, lo, hi) if cfg.heads > 1 else k
        vh = slice_cols(v, lo, hi) if cfg.heads > 1 else v
        q_groups, _, _ = partition_groups(qh, cfg.l_g)
        k_groups, _, _ = partition_groups(kh, cfg.l_g)
        v_groups, _, _ = partition_groups(vh, cfg.l_g)

        local = []
        for j in range(m):
            valid = min(max(real_len - j * cfg.l_g, 0), cfg.l_g)
            mask = AttentionMask.key_padding(valid) if valid < cfg.l_g else AttentionMask.none()
            if cfg.causal:
                mask = mask.combined_with(AttentionMask.causal(), cfg.l_g, cfg.l_g)
            local.append(scaled_dot_attention(
                q_groups[j], k_groups[j], v_groups[j], mask, counter))

        if use_global:
            summaries = [summarize_group(q_groups[j], k_groups[j], v_groups[j],
                                         params.e_q, params.e_k, params.e_v)
                         for j in range(m)]
            o_s = global_summary_attention(
                concat_rows([s[0] for s in summaries]),
                concat_rows([s[1] for s in summaries]),
                concat_rows([s[2] for s in summaries]),
                cfg.l_s, counter)
            merged = []
            for j in range(m):
                seg = slice_rows(o_s, j * cfg.l_s, (j + 1) * cfg.l_s)
                idx = j if cfg.merge_per_group else 0
                alpha_j = slice_cols(params.alpha, idx, idx + 1)
                beta_j = slice_cols(params.beta, idx, idx + 1)
                merged.append(merge_outputs(local[j], seg, alpha_j, beta_j,
                                            cfg.pool_mode))
        else:
            merged = local

        head_out = concat_rows(merged)
        if padded_len > l:
            head_out = slice_rows(head_out, 0, l)
        head_outs.append(head_out)

    combined = concat_cols(head_outs) if cfg.heads > 1 else head_outs[0]
    return broadcast_add(matmul(combined, params.w_o), params.b_o)
