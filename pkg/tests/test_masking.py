"""Blockwise mask sampling statistics and corruption invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskcluster.masking import (
    BlockMask,
    CorruptionPolicy,
    corrupt,
    sample_block_mask,
)


def test_mask_reaches_requested_fraction():
    rng = np.random.default_rng(0)
    for ratio in (0.0, 0.25, 0.5, 0.75):
        m = sample_block_mask(14, 14, ratio, rng)
        assert m.masked_fraction >= ratio
        assert m.grid.shape == (14, 14)


def test_mask_overshoot_is_bounded():
    # mean fraction over many draws stays close to the request
    rng = np.random.default_rng(42)
    fracs = [sample_block_mask(14, 14, 0.5, rng).masked_fraction
             for _ in range(300)]
    assert 0.50 <= np.mean(fracs) <= 0.55


def test_mask_determinism():
    a = sample_block_mask(8, 8, 0.4, np.random.default_rng(9))
    b = sample_block_mask(8, 8, 0.4, np.random.default_rng(9))
    np.testing.assert_array_equal(a.grid, b.grid)
    assert a.blocks == b.blocks


def test_mask_ratio_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_block_mask(8, 8, 1.0, rng)
    with pytest.raises(ValueError):
        sample_block_mask(8, 8, -0.1, rng)


def test_pixel_mask_and_token_mask(rng):
    m = sample_block_mask(4, 4, 0.5, rng, patch_size=3)
    assert m.pixel_mask.shape == (12, 12)
    np.testing.assert_array_equal(m.pixel_mask[::3, ::3], m.grid)
    np.testing.assert_array_equal(m.token_mask(), m.grid.ravel())


def test_serialization_roundtrip(rng):
    m = sample_block_mask(7, 5, 0.3, rng, patch_size=2)
    back = BlockMask.from_bytes(m.to_bytes(), ratio_requested=0.3)
    np.testing.assert_array_equal(back.grid, m.grid)
    assert back.patch_size == 2


def test_policy_validation():
    with pytest.raises(ValueError):
        CorruptionPolicy(noise=0.5, zeros=0.2, alien=0.2)
    with pytest.raises(ValueError):
        CorruptionPolicy(noise=-0.1, zeros=0.6, alien=0.5)
    CorruptionPolicy(noise=0.5, zeros=0.5, alien=0.0)


def test_corrupt_leaves_unmasked_pixels_byte_identical(rng):
    img = rng.uniform(size=(3, 16, 16))
    m = sample_block_mask(4, 4, 0.5, rng, patch_size=4)
    alien = rng.uniform(size=(3, 16, 16))
    out = corrupt(img, m, CorruptionPolicy(), alien, rng)
    keep = ~m.pixel_mask
    assert out[:, keep].tobytes() == img[:, keep].tobytes()


def test_corrupt_modes(rng):
    img = np.full((3, 8, 8), 0.5)
    m = sample_block_mask(8, 8, 0.4, rng)
    zeros_only = CorruptionPolicy(noise=0.0, zeros=1.0, alien=0.0)
    out = corrupt(img, m, zeros_only, rng=rng)
    assert (out[:, m.pixel_mask] == 0.0).all()
    alien = np.full((3, 8, 8), 0.25)
    alien_only = CorruptionPolicy(noise=0.0, zeros=0.0, alien=1.0)
    out = corrupt(img, m, alien_only, alien, rng)
    assert (out[:, m.pixel_mask] == 0.25).all()
    noise_only = CorruptionPolicy(noise=1.0, zeros=0.0, alien=0.0,
                                  noise_range=(0.9, 1.0))
    out = corrupt(img, m, noise_only, rng=rng)
    assert (out[:, m.pixel_mask] >= 0.9).all()


def test_corrupt_requires_alien_source(rng):
    img = rng.uniform(size=(3, 8, 8))
    m = sample_block_mask(8, 8, 0.3, rng)
    with pytest.raises(ValueError):
        corrupt(img, m, CorruptionPolicy(), alien_source=None, rng=rng)


def test_corrupt_does_not_mutate_input(rng):
    img = rng.uniform(size=(3, 8, 8))
    before = img.copy()
    m = sample_block_mask(8, 8, 0.5, rng)
    corrupt(img, m, CorruptionPolicy(noise=1.0, zeros=0.0, alien=0.0), rng=rng)
    np.testing.assert_array_equal(img, before)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 16), st.integers(2, 16),
       st.floats(0.0, 0.9), st.integers(0, 2 ** 32 - 1))
def test_mask_covers_at_least_ratio(h, w, ratio, seed):
    m = sample_block_mask(h, w, ratio, np.random.default_rng(seed))
    assert m.grid.sum() >= np.ceil(ratio * h * w)
    # every recorded block really is masked
    for r0, c0, bh, bw in m.blocks:
        assert m.grid[r0:r0 + bh, c0:c0 + bw].all()
