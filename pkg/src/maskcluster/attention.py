"""Split self/cross attention for masked token sequences.

Masked inputs are partitioned into unmasked and masked index sets. Unmasked
tokens attend to each other (self attention); masked tokens attend only to
the unmasked set (cross attention). The two results are concatenated and
scattered back into original token order, so downstream residual adds line
up. Score work drops from n^2 to n*(n-m) entries per head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    concat,
    gather_rows,
    gather_rows_batched,
    matmul,
    reshape,
    scale,
    scatter_rows,
    scatter_rows_batched,
    softmax,
    transpose,
)


@dataclass
class AttentionStats:
    """Instrumentation: call counts and materialized score-entry totals."""

    efficient_calls: int = 0
    standard_calls: int = 0
    masked_encodes: int = 0
    last_entries_per_head: int = 0
    total_entries: int = 0

    def reset(self):
        self.efficient_calls = 0
        self.standard_calls = 0
        self.masked_encodes = 0
        self.last_entries_per_head = 0
        self.total_entries = 0


stats = AttentionStats()


@dataclass(frozen=True)
class TokenPartition:
    """Masked/unmasked split of token indices 0..n_total-1.

    Index 0 (the class token) is always unmasked; both index lists are kept
    strictly increasing so scatter-back is deterministic.
    """

    n_total: int
    unmasked_idx: np.ndarray
    masked_idx: np.ndarray

    def __post_init__(self):
        un = np.asarray(self.unmasked_idx, dtype=np.intp)
        mk = np.asarray(self.masked_idx, dtype=np.intp)
        object.__setattr__(self, "unmasked_idx", un)
        object.__setattr__(self, "masked_idx", mk)
        if un.size == 0 or un[0] != 0:
            raise ValueError("token 0 (class token) must be unmasked")
        for name, idx in (("unmasked_idx", un), ("masked_idx", mk)):
            if idx.size > 1 and not np.all(np.diff(idx) > 0):
                raise ValueError(f"{name} must be strictly increasing")
        universe = np.concatenate([un, mk])
        if (un.size + mk.size != self.n_total
                or not np.array_equal(np.sort(universe), np.arange(self.n_total))):
            raise ValueError(
                f"partition must cover 0..{self.n_total - 1} exactly once")

    @property
    def n_masked(self) -> int:
        return int(self.masked_idx.size)

    @property
    def n_unmasked(self) -> int:
        return int(self.unmasked_idx.size)

    @classmethod
    def from_token_mask(cls, masked: np.ndarray) -> "TokenPartition":
        """Build from a boolean vector over tokens (True = masked)."""
        masked = np.asarray(masked, dtype=bool)
        if masked[0]:
            raise ValueError("token 0 (class token) may not be masked")
        idx = np.arange(masked.size)
        return cls(masked.size, idx[~masked], idx[masked])


def score_entry_count(n: int, m: int) -> tuple[int, int]:
    """Score-matrix entries per head: (split kernel, dense kernel)."""
    if not 0 <= m < n:
        raise ValueError(f"need 0 <= m < n, got n={n}, m={m}")
    return n * (n - m), n * n


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, dh: int) -> Tensor:
    logits = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    return matmul(softmax(logits, axis=-1), v)


def standard_attention(x: Tensor, weights: dict, heads: int) -> Tensor:
    """Dense multi-head self attention over all tokens."""
    b, n, d = x.shape
    if d % heads != 0:
        raise ValueError(f"embed dim {d} not divisible by {heads} heads")
    dh = d // heads
    q = _split_heads(matmul(x, weights["W_q"]), heads)
    k = _split_heads(matmul(x, weights["W_k"]), heads)
    v = _split_heads(matmul(x, weights["W_v"]), heads)
    out = _merge_heads(_attend(q, k, v, dh))
    stats.standard_calls += 1
    return matmul(out, weights["W_o"])


def efficient_attention(x: Tensor, partition, weights: dict,
                        heads: int) -> Tensor:
    """Split self/cross attention; output rows follow input token order.

    `partition` is either one TokenPartition shared by the whole batch, or
    a sequence of per-sample partitions that all have the same masked
    count (so the gathered shapes line up for batching).
    """
    b, n, d = x.shape
    parts = list(partition) if isinstance(partition, (list, tuple)) else None
    if parts is not None:
        if len(parts) != b:
            raise ValueError(f"{len(parts)} partitions for batch of {b}")
        if len({p.n_masked for p in parts}) != 1:
            raise ValueError(
                "per-sample partitions must share one masked count")
        first = parts[0]
    else:
        first = partition
    if first.n_total != n:
        raise ValueError(
            f"partition covers {first.n_total} tokens, input has {n}")
    if d % heads != 0:
        raise ValueError(f"embed dim {d} not divisible by {heads} heads")
    dh = d // heads
    m = first.n_masked

    q = _split_heads(matmul(x, weights["W_q"]), heads)
    k = _split_heads(matmul(x, weights["W_k"]), heads)
    v = _split_heads(matmul(x, weights["W_v"]), heads)

    if parts is None:
        un, mk = first.unmasked_idx, first.masked_idx
        gather = gather_rows
        scatter = lambda t, order: scatter_rows(t, order, n_total=n, axis=-2)
        cat_order = np.concatenate
    else:
        un = np.stack([p.unmasked_idx for p in parts])
        mk = np.stack([p.masked_idx for p in parts])
        gather = gather_rows_batched
        scatter = lambda t, order: scatter_rows_batched(t, order, n_total=n,
                                                        axis=-2)
        cat_order = lambda seq: np.concatenate(seq, axis=-1)

    q_un = gather(q, un)
    k_un = gather(k, un)
    v_un = gather(v, un)

    self_attn = _attend(q_un, k_un, v_un, dh)
    if m > 0:
        cross_attn = _attend(gather(q, mk), k_un, v_un, dh)
        stacked = concat([self_attn, cross_attn], axis=-2)
        order = cat_order([un, mk])
    else:
        stacked = self_attn
        order = un
    out = scatter(stacked, order)

    entries = n * (n - m)
    stats.efficient_calls += 1
    stats.last_entries_per_head = entries
    stats.total_entries += entries * b * heads
    return matmul(_merge_heads(out), weights["W_o"])
