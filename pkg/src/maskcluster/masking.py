"""Blockwise mask sampling on the token grid and pixel-space corruption.

Rectangular blocks are accumulated on the patch grid until the requested
masked fraction is reached (overshoot by at most one block, never
undershoot). Masked blocks are then corrupted in pixel space with a mix of
uniform noise, zeros, or co-located pixels from another image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ASPECT_MIN = 0.3
# Largest single-block area as a fraction of the grid; bounds the overshoot.
MAX_BLOCK_FRAC = 0.08


@dataclass
class BlockMask:
    grid: np.ndarray                      # (h_tok, w_tok) bool, True = masked
    ratio_requested: float
    patch_size: int = 1
    blocks: list = field(default_factory=list)   # (r0, c0, h, w) rectangles

    @property
    def pixel_mask(self) -> np.ndarray:
        p = self.patch_size
        return np.kron(self.grid, np.ones((p, p), dtype=bool))

    @property
    def masked_fraction(self) -> float:
        return float(self.grid.mean())

    def token_mask(self) -> np.ndarray:
        """Flat boolean over patch tokens, row-major grid order."""
        return self.grid.ravel()

    def to_bytes(self) -> bytes:
        h, w = self.grid.shape
        header = np.array([h, w, self.patch_size], dtype=np.uint16).tobytes()
        return header + np.packbits(self.grid.ravel()).tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, ratio_requested: float = 0.0) -> "BlockMask":
        h, w, p = np.frombuffer(raw[:6], dtype=np.uint16)
        bits = np.unpackbits(np.frombuffer(raw[6:], dtype=np.uint8))[: h * w]
        return cls(bits.astype(bool).reshape(h, w), ratio_requested, int(p))


@dataclass(frozen=True)
class CorruptionPolicy:
    """Mode weights for masked-region corruption."""

    noise: float = 1.0 / 3.0
    zeros: float = 1.0 / 3.0
    alien: float = 1.0 / 3.0
    noise_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        w = (self.noise, self.zeros, self.alien)
        if any(x < 0 for x in w):
            raise ValueError("corruption weights must be nonnegative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"corruption weights must sum to 1, got {sum(w)}")


def sample_block_mask(h_tok: int, w_tok: int, ratio: float,
                      rng: np.random.Generator,
                      patch_size: int = 1) -> BlockMask:
    """Union of random rectangles covering at least `ratio` of the grid."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"masking ratio must be in [0, 1), got {ratio}")
    grid = np.zeros((h_tok, w_tok), dtype=bool)
    blocks: list = []
    cells = h_tok * w_tok
    target = math.ceil(ratio * cells)
    max_area = max(1, round(MAX_BLOCK_FRAC * cells))
    log_lo, log_hi = math.log(ASPECT_MIN), math.log(1.0 / ASPECT_MIN)
    while grid.sum() < target:
        area = int(rng.integers(1, max_area + 1))
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        bh = int(np.clip(round(math.sqrt(area * aspect)), 1, h_tok))
        bw = int(np.clip(round(math.sqrt(area / aspect)), 1, w_tok))
        r0 = int(rng.integers(0, h_tok - bh + 1))
        c0 = int(rng.integers(0, w_tok - bw + 1))
        grid[r0:r0 + bh, c0:c0 + bw] = True
        blocks.append((r0, c0, bh, bw))
    return BlockMask(grid, ratio, patch_size, blocks)


def corrupt(image: np.ndarray, mask: BlockMask, policy: CorruptionPolicy,
            alien_source: Optional[np.ndarray] = None,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Corrupt masked blocks of a (C,H,W) image; unmasked pixels untouched.

    Each block independently draws one mode from the policy weights:
    uniform noise, zeros, or the co-located pixels of `alien_source`.
    """
    if policy.alien > 0 and alien_source is None:
        raise ValueError("alien corruption weight > 0 but no alien_source given")
    if rng is None:
        rng = np.random.default_rng()
    out = image.copy()
    p = mask.patch_size
    lo, hi = policy.noise_range
    weights = np.array([policy.noise, policy.zeros, policy.alien])
    for r0, c0, bh, bw in mask.blocks:
        rows = slice(r0 * p, (r0 + bh) * p)
        cols = slice(c0 * p, (c0 + bw) * p)
        mode = rng.choice(3, p=weights)
        if mode == 0:
            out[:, rows, cols] = rng.uniform(
                lo, hi, size=out[:, rows, cols].shape)
        elif mode == 1:
            out[:, rows, cols] = 0.0
        else:
            out[:, rows, cols] = alien_source[:, rows, cols]
    return out
