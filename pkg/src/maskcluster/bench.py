"""Wall-clock benchmark for the split masked-attention kernel.

Measures images/second at several masking ratios, both for the attention
layer in isolation and for a full encoder forward, alongside the analytic
score-entry count n*(n-m) that explains the trend.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import attention as attn
from .encoder import EncoderConfig, forward_views, init_encoder_params
from .tensor import Tensor


@dataclass(frozen=True)
class BenchRow:
    masking_ratio: float
    images_per_second: float
    score_entries_per_image: int
    speedup_vs_ratio0: float


@dataclass(frozen=True)
class BenchReport:
    kind: str                     # "kernel" or "forward"
    n_tokens: int
    dim: int
    heads: int
    batch: int
    rows: tuple

    def as_csv(self) -> str:
        lines = ["masking_ratio,images_per_second,score_entries_per_image,"
                 "speedup_vs_ratio0"]
        for r in self.rows:
            lines.append(f"{r.masking_ratio},{r.images_per_second:.3f},"
                         f"{r.score_entries_per_image},{r.speedup_vs_ratio0:.4f}")
        return "\n".join(lines) + "\n"

    def as_table(self) -> str:
        head = (f"{self.kind} benchmark  n={self.n_tokens} d={self.dim} "
                f"heads={self.heads} batch={self.batch}")
        lines = [head,
                 f"{'ratio':>6} {'imgs/sec':>10} {'score entries':>14} "
                 f"{'speedup':>8}"]
        for r in self.rows:
            lines.append(f"{r.masking_ratio:>6.2f} {r.images_per_second:>10.2f} "
                         f"{r.score_entries_per_image:>14d} "
                         f"{r.speedup_vs_ratio0:>8.3f}")
        return "\n".join(lines)


def _partition_for_ratio(n_tokens: int, ratio: float,
                         rng: np.random.Generator) -> attn.TokenPartition:
    n_patches = n_tokens - 1
    m = int(round(ratio * n_patches))
    masked = rng.choice(np.arange(1, n_tokens), size=m, replace=False)
    token_mask = np.zeros(n_tokens, dtype=bool)
    token_mask[masked] = True
    return attn.TokenPartition.from_token_mask(token_mask)


def _measure(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_attention(n_tokens: int = 197, dim: int = 384, heads: int = 6,
                    batch: int = 8, ratios=(0.0, 0.25, 0.5, 0.75),
                    repeats: int = 9, warmup: int = 2, seed: int = 0,
                    single_precision: bool = True) -> BenchReport:
    """Kernel-isolated throughput of the split attention per masking ratio."""
    ratios = tuple(float(r) for r in ratios)
    if 0.0 not in ratios:
        raise ValueError("ratios must include 0 as the baseline")
    rng = np.random.default_rng(seed)
    dtype = np.float32 if single_precision else np.float64
    x = Tensor(rng.standard_normal((batch, n_tokens, dim)).astype(dtype))
    weights = {w: Tensor(rng.standard_normal((dim, dim)).astype(dtype) * 0.02)
               for w in ("W_q", "W_k", "W_v", "W_o")}

    rows = []
    base = None
    for ratio in ratios:
        part = _partition_for_ratio(n_tokens, ratio, rng)
        med = _measure(lambda: attn.efficient_attention(x, part, weights, heads),
                       repeats, warmup)
        entries = attn.score_entry_count(n_tokens, part.n_masked)[0]
        assert attn.stats.last_entries_per_head == entries
        ips = batch / med
        if base is None:
            base = ips
        rows.append(BenchRow(ratio, ips, entries, ips / base))
    return BenchReport("kernel", n_tokens, dim, heads, batch, tuple(rows))


def bench_full_forward(n_tokens: int = 197, dim: int = 384, heads: int = 6,
                       batch: int = 8, depth: int = 4,
                       ratios=(0.0, 0.25, 0.5, 0.75), repeats: int = 5,
                       warmup: int = 1, seed: int = 0) -> BenchReport:
    """Throughput of a full masked student encoder forward per ratio."""
    ratios = tuple(float(r) for r in ratios)
    if 0.0 not in ratios:
        raise ValueError("ratios must include 0 as the baseline")
    side = int(round((n_tokens - 1) ** 0.5))
    if side * side != n_tokens - 1:
        raise ValueError(f"n_tokens-1 = {n_tokens - 1} must be a square")
    patch = 16
    cfg = EncoderConfig(image_size=side * patch, patch_size=patch,
                        embed_dim=dim, depth=depth, heads=heads)
    rng = np.random.default_rng(seed)
    params = init_encoder_params(cfg, rng, requires_grad=False)
    images = Tensor(rng.uniform(0, 1, (batch, 3, cfg.image_size, cfg.image_size)))

    rows = []
    base = None
    for ratio in ratios:
        part = _partition_for_ratio(n_tokens, ratio, rng)
        med = _measure(lambda: forward_views(images, params, cfg, part),
                       repeats, warmup)
        entries = attn.score_entry_count(n_tokens, part.n_masked)[0]
        ips = batch / med
        if base is None:
            base = ips
        rows.append(BenchRow(ratio, ips, entries, ips / base))
    return BenchReport("forward", n_tokens, dim, heads, batch, tuple(rows))
