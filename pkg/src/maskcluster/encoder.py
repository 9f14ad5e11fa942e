"""Vision-transformer backbone shared by teacher and student.

Patchify, linear embed, prepend class token, add positional embeddings,
then run pre-norm transformer blocks. Every block's output is returned so
the reconstruction head can sum intermediate layers. When a TokenPartition
is supplied the blocks use the split masked-attention kernel, otherwise
dense attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from . import attention as attn
from .tensor import (
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    reshape,
    transpose,
)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    image_channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size "
                f"{self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    vals = rng.normal(0.0, std, size=shape)
    return np.clip(vals, -2 * std, 2 * std)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        requires_grad: bool = True) -> dict:
    """Parameter dict for one encoder, truncated-normal init."""
    d, p, c = cfg.embed_dim, cfg.patch_size, cfg.image_channels

    def param(shape, zero=False, one=False):
        if zero:
            data = np.zeros(shape)
        elif one:
            data = np.ones(shape)
        else:
            data = trunc_normal(rng, shape)
        return Tensor(data, requires_grad=requires_grad)

    params = {
        "patch_embed.W": param((p * p * c, d)),
        "patch_embed.b": param((d,), zero=True),
        "cls": param((1, 1, d)),
        "pos": param((1, cfg.n_patches + 1, d)),
    }
    for i in range(cfg.depth):
        blk = f"block{i}"
        params[f"{blk}.ln1.g"] = param((d,), one=True)
        params[f"{blk}.ln1.b"] = param((d,), zero=True)
        for w in ("W_q", "W_k", "W_v", "W_o"):
            params[f"{blk}.attn.{w}"] = param((d, d))
        params[f"{blk}.ln2.g"] = param((d,), one=True)
        params[f"{blk}.ln2.b"] = param((d,), zero=True)
        params[f"{blk}.mlp.W1"] = param((d, d * cfg.mlp_ratio))
        params[f"{blk}.mlp.b1"] = param((d * cfg.mlp_ratio,), zero=True)
        params[f"{blk}.mlp.W2"] = param((d * cfg.mlp_ratio, d))
        params[f"{blk}.mlp.b2"] = param((d,), zero=True)
    return params


def patch_embed(images: Tensor, params: dict, cfg: EncoderConfig) -> Tensor:
    """(B,C,H,W) -> (B,N,d) linear projection of non-overlapping patches."""
    b, c, h, w = images.shape
    p = cfg.patch_size
    if h % p != 0 or w % p != 0:
        raise ValueError(f"resolution {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = reshape(images, (b, c, gh, p, gw, p))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    x = reshape(x, (b, gh * gw, c * p * p))
    return add(matmul(x, params["patch_embed.W"]), params["patch_embed.b"])


def _interp_matrix(old: int, new: int) -> np.ndarray:
    """(new, old) matrix applying 1-D cubic-spline interpolation by
    resampling each basis vector at evenly spaced positions."""
    if old == new:
        return np.eye(old)
    coords = np.linspace(0.0, old - 1.0, new)
    if old < 4:
        # not enough points for a cubic; fall back to linear
        m = np.zeros((new, old))
        for j in range(old):
            m[:, j] = np.interp(coords, np.arange(old), np.eye(old)[:, j])
        return m
    basis = np.eye(old)
    return CubicSpline(np.arange(old), basis, axis=0)(coords)


_INTERP_CACHE: dict = {}


def interpolate_pos_grid(pos_grid: Tensor, new_side: int) -> Tensor:
    """Bicubic resample of a (g,g,d) positional grid to (new,new,d)."""
    g = pos_grid.shape[0]
    d = pos_grid.shape[2]
    key = (g, new_side)
    if key not in _INTERP_CACHE:
        _INTERP_CACHE[key] = _interp_matrix(g, new_side)
    m = Tensor(_INTERP_CACHE[key])
    rows = reshape(matmul(m, reshape(pos_grid, (g, g * d))), (new_side, g, d))
    cols_in = reshape(transpose(rows, (1, 0, 2)), (g, new_side * d))
    out = reshape(matmul(m, cols_in), (new_side, new_side, d))
    return transpose(out, (1, 0, 2))


def prepend_cls_and_pos(tokens: Tensor, params: dict, cfg: EncoderConfig) -> Tensor:
    """(B,N,d) -> (B,N+1,d) with class token at row 0 and positions added.

    Crops smaller than the configured image get positions bicubically
    interpolated from the global grid; the class-token position is kept
    verbatim.
    """
    b, n, d = tokens.shape
    side = int(round(n ** 0.5))
    if side * side != n:
        raise ValueError(f"token count {n} is not a square grid")
    cls_tok = params["cls"]
    cls_rows = add(cls_tok, Tensor(np.zeros((b, 1, d))))
    x = concat([cls_rows, tokens], axis=1)

    pos = params["pos"]
    g = cfg.grid_side
    if side == g:
        return add(x, pos)
    cls_pos = reshape(gather_rows_pos(pos, 0), (1, 1, d))
    grid = reshape(gather_rows_pos(pos, slice(1, g * g + 1)), (g, g, d))
    small = reshape(interpolate_pos_grid(grid, side), (1, side * side, d))
    return add(x, concat([cls_pos, small], axis=1))


def gather_rows_pos(pos: Tensor, sel) -> Tensor:
    """Row selection on the (1, N+1, d) positional table."""
    from .tensor import gather_rows

    if isinstance(sel, slice):
        idx = np.arange(pos.shape[1])[sel]
    else:
        idx = np.atleast_1d(sel)
    return gather_rows(pos, idx, axis=1)


def _block(x: Tensor, params: dict, blk: str, heads: int,
           partition: Optional[attn.TokenPartition]) -> Tensor:
    weights = {w: params[f"{blk}.attn.{w}"] for w in ("W_q", "W_k", "W_v", "W_o")}
    h = layer_norm(x, params[f"{blk}.ln1.g"], params[f"{blk}.ln1.b"])
    if partition is not None:
        a = attn.efficient_attention(h, partition, weights, heads)
    else:
        a = attn.standard_attention(h, weights, heads)
    x = add(x, a)
    h = layer_norm(x, params[f"{blk}.ln2.g"], params[f"{blk}.ln2.b"])
    h = gelu(add(matmul(h, params[f"{blk}.mlp.W1"]), params[f"{blk}.mlp.b1"]))
    h = add(matmul(h, params[f"{blk}.mlp.W2"]), params[f"{blk}.mlp.b2"])
    return add(x, h)


def encode(tokens_in: Tensor, params: dict, cfg: EncoderConfig,
           partition: Optional[attn.TokenPartition] = None) -> list:
    """Run all blocks; returns the (B,N+1,d) output of every layer."""
    n = tokens_in.shape[1]
    if partition is not None:
        first = (partition[0] if isinstance(partition, (list, tuple))
                 else partition)
        if first.n_total != n:
            raise ValueError(
                f"partition covers {first.n_total} tokens, input has {n}")
        # counted per image-view so grouping/batching does not change it
        attn.stats.masked_encodes += tokens_in.shape[0]
    outputs = []
    x = tokens_in
    for i in range(cfg.depth):
        x = _block(x, params, f"block{i}", cfg.heads, partition)
        outputs.append(x)
    return outputs


def forward_views(images: Tensor, params: dict, cfg: EncoderConfig,
                  partition: Optional[attn.TokenPartition] = None) -> list:
    """Full encoder pass: pixels -> per-layer token outputs."""
    tokens = patch_embed(images, params, cfg)
    tokens = prepend_cls_and_pos(tokens, params, cfg)
    return encode(tokens, params, cfg, partition)
