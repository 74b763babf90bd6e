import numpy as np
import pytest
import torch

from cadet.maskgen import (
    TokenAttentionMap,
    aggregate_attention,
    binarize,
    gaussian_smooth3,
    otsu_threshold,
    residual_mask,
)
from cadet.textenc import TokenSeq
from cadet.unet import AttentionStack


def test_smoothing_preserves_constant_maps():
    m = np.full((16, 16), 0.25)
    out = gaussian_smooth3(m)
    np.testing.assert_allclose(out, m, atol=1e-12)


def test_smoothing_preserves_mass():
    rng = np.random.default_rng(0)
    m = rng.random((16, 16))
    out = gaussian_smooth3(m)
    # reflective padding keeps total mass (the kernel sums to 1)
    assert abs(out.sum() - m.sum()) < 1e-6 * m.sum() + 1e-9


def _stack_from(maps_16, n_tokens, timestep=0):
    """Build a recorded stack with given per-layer (hw, n) maps at 16x16."""
    stack = AttentionStack()
    layer_maps = {}
    for i, m in enumerate(maps_16):
        # (B=1, heads=1, hw, n)
        layer_maps[f"l{i}"] = torch.as_tensor(m, dtype=torch.float64)[None, None]
    grids = {f"l{i}": int(np.sqrt(maps_16[0].shape[0])) for i in range(len(maps_16))}
    stack.record(timestep, layer_maps, grids)
    return stack


def _tokens_with_slot(position, slot_index, n):
    return TokenSeq(ids=list(range(n)), slot_positions=[position],
                    slot_indices=[slot_index])


def test_aggregate_single_layer_is_smoothed_map():
    rng = np.random.default_rng(1)
    A = rng.random((256, 3))  # 16x16 grid, 3 tokens
    stack = _stack_from([A], 3)
    toks = _tokens_with_slot(position=1, slot_index=0, n=3)
    out = aggregate_attention(stack, toks, ("pin",))
    expected = gaussian_smooth3(A[:, 1].reshape(16, 16))
    np.testing.assert_allclose(out.maps["pin"], expected, atol=1e-12)


def test_aggregate_two_layers_average():
    rng = np.random.default_rng(2)
    P, Q = rng.random((256, 2)), rng.random((256, 2))
    stack = _stack_from([P, Q], 2)
    toks = _tokens_with_slot(position=0, slot_index=0, n=2)
    out = aggregate_attention(stack, toks, ("pin",))
    expected = gaussian_smooth3(((P + Q) / 2)[:, 0].reshape(16, 16))
    np.testing.assert_allclose(out.maps["pin"], expected, atol=1e-12)


def test_aggregate_sums_repeated_noun_occurrences():
    rng = np.random.default_rng(3)
    A = rng.random((256, 4))
    stack = _stack_from([A], 4)
    toks = TokenSeq(ids=[0, 1, 2, 3], slot_positions=[1, 3], slot_indices=[0, 0])
    out = aggregate_attention(stack, toks, ("pin",))
    expected = gaussian_smooth3((A[:, 1] + A[:, 3]).reshape(16, 16))
    np.testing.assert_allclose(out.maps["pin"], expected, atol=1e-12)


def test_aggregate_absent_noun_is_zero_map():
    A = np.random.default_rng(4).random((256, 2))
    stack = _stack_from([A], 2)
    toks = _tokens_with_slot(position=0, slot_index=0, n=2)
    out = aggregate_attention(stack, toks, ("pin", "bolt"))
    assert np.all(out.maps["bolt"] == 0)


def test_residual_zero_when_equal():
    m = {"pin": np.random.default_rng(5).random((16, 16))}
    a = TokenAttentionMap(dict(m), "gen")
    b = TokenAttentionMap(dict(m), "norm")
    heat = residual_mask(a, b)
    assert np.all(heat == 0)
    assert not binarize(heat).any()


def test_residual_symmetric_and_peaked():
    rng = np.random.default_rng(6)
    base = rng.random((16, 16)) * 0.1
    bumped = base.copy()
    bumped[4, 7] += 5.0
    a = TokenAttentionMap({"pin": base}, "gen")
    b = TokenAttentionMap({"pin": bumped}, "norm")
    h1 = residual_mask(a, b)
    h2 = residual_mask(b, a)
    np.testing.assert_allclose(h1, h2)
    assert h1.max() == 1.0
    py, px = np.unravel_index(np.argmax(h1), h1.shape)
    # peak lands on the bumped cell's upsampled footprint (cell 7,4 of 16 -> x4)
    assert abs(py - 4 * 4) <= 4 and abs(px - 7 * 4) <= 4


def test_residual_grid_mismatch_rejected():
    a = TokenAttentionMap({"pin": np.zeros((16, 16))}, "gen")
    b = TokenAttentionMap({"pin": np.zeros((8, 8))}, "norm")
    with pytest.raises(ValueError):
        residual_mask(a, b)


def test_otsu_separates_bimodal():
    h = np.zeros((64, 64))
    h[:20] = 0.1
    h[20:] = 0.9
    th = otsu_threshold(h)
    assert 0.1 < th < 0.9
    mask = binarize(h)
    np.testing.assert_array_equal(mask, h > 0.5)


def test_binarize_removes_speckle():
    h = np.zeros((64, 64))
    h[10:20, 10:20] = 0.9  # 100 px: stays
    h[40, 40] = 0.9
    h[50, 55] = 0.9
    h[60, 3] = 0.9  # 3 isolated px < 0.1% of 4096: removed
    mask = binarize(h)
    assert mask[15, 15]
    assert not mask[40, 40] and not mask[50, 55] and not mask[60, 3]


def test_binarize_rejects_out_of_range():
    with pytest.raises(ValueError):
        binarize(np.full((8, 8), 1.5))
