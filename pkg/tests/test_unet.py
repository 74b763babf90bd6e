import numpy as np
import pytest
import torch

from cadet.unet import (
    AttentionStack,
    CrossAttnBlock,
    DiffusionModel,
    SinusoidalTimeEmbedding,
    UNetConfig,
    cross_attention,
)


def test_cross_attention_matches_manual_softmax():
    torch.manual_seed(0)
    Q = torch.randn(2, 5, 8)
    K = torch.randn(2, 7, 8)
    V = torch.randn(2, 7, 8)
    out, A = cross_attention(Q, K, V)
    logits = Q @ K.transpose(1, 2) / np.sqrt(8)
    A_ref = torch.softmax(logits, dim=-1)
    torch.testing.assert_close(A, A_ref)
    torch.testing.assert_close(out, A_ref @ V)


def test_cross_attention_rows_sum_to_one():
    torch.manual_seed(1)
    _, A = cross_attention(torch.randn(3, 9, 16), torch.randn(3, 4, 16),
                           torch.randn(3, 4, 16))
    torch.testing.assert_close(A.sum(-1), torch.ones(3, 9))


def test_cross_attention_key_mask():
    torch.manual_seed(2)
    Q, K, V = torch.randn(1, 3, 8), torch.randn(1, 4, 8), torch.randn(1, 4, 8)
    mask = torch.tensor([[False, False, True, True]])
    _, A = cross_attention(Q, K, V, key_mask=mask)
    assert torch.all(A[..., 2:] == 0)
    torch.testing.assert_close(A.sum(-1), torch.ones(1, 3))


def test_time_embedding_distinct_and_deterministic():
    emb = SinusoidalTimeEmbedding(32)
    t = torch.tensor([0, 1, 50, 399])
    e = emb(t)
    assert e.shape == (4, 32)
    assert not torch.allclose(e[0], e[3])
    torch.testing.assert_close(e, emb(t))


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return DiffusionModel(UNetConfig())


def test_model_output_shape(model):
    x = torch.randn(2, 3, 64, 64)
    cond = torch.randn(2, 6, 64)
    eps, maps = model(x, torch.tensor([3, 7]), cond, None, record=False)
    assert eps.shape == x.shape
    assert maps is None


def test_model_records_attention_at_grids(model):
    x = torch.randn(1, 3, 64, 64)
    cond = torch.randn(1, 5, 64)
    eps, maps = model(x, torch.tensor([0]), cond, None, record=True)
    assert set(maps) == set(DiffusionModel.ATTN_GRIDS)
    for name, g in DiffusionModel.ATTN_GRIDS.items():
        A = maps[name]
        assert A.shape == (1, UNetConfig().heads, g * g, 5)
        torch.testing.assert_close(A.sum(-1), torch.ones(1, UNetConfig().heads, g * g))


def test_attention_stack_grid_lookup(model):
    x = torch.randn(1, 3, 64, 64)
    cond = torch.randn(1, 4, 64)
    stack = AttentionStack()
    _, maps = model(x, torch.tensor([5]), cond, None, record=True)
    stack.record(5, maps, dict(DiffusionModel.ATTN_GRIDS))
    at16 = stack.layers_at_grid(5, 16)
    assert len(at16) == 2  # one on the way down, one on the way up
    at8 = stack.layers_at_grid(5, 8)
    assert len(at8) == 1


def test_model_deterministic(model):
    x = torch.randn(1, 3, 64, 64)
    cond = torch.randn(1, 4, 64)
    t = torch.tensor([9])
    a, _ = model(x, t, cond, None)
    b, _ = model(x, t, cond, None)
    torch.testing.assert_close(a, b)


def test_cond_mask_changes_output(model):
    x = torch.randn(1, 3, 64, 64)
    cond = torch.randn(1, 6, 64)
    mask = torch.zeros(1, 6, dtype=torch.bool)
    mask[0, 3:] = True
    a, _ = model(x, torch.tensor([2]), cond, None)
    b, _ = model(x, torch.tensor([2]), cond, mask)
    assert not torch.allclose(a, b)


def test_cross_attn_block_gradients_float64():
    from gradcheck import central_difference_check

    torch.manual_seed(3)
    block = CrossAttnBlock(16, 24).double()
    x = torch.randn(1, 16, 8, 8, dtype=torch.float64)
    cond = torch.randn(1, 5, 24, dtype=torch.float64)

    def loss_fn():
        out, _ = block(x, cond, None)
        return (out**2).mean()

    central_difference_check(loss_fn, block, n_params=20, eps=1e-6)
