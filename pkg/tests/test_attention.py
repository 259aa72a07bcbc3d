"""Channel-independent attention block contracts."""

import numpy as np
import pytest

from tsmoe.attention import AttentionBlock
from tsmoe.autodiff import Tensor


def _layer_norm_np(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _block(d=2, heads=1, seed=0):
    return AttentionBlock(d, heads, np.random.default_rng(seed))


def test_heads_must_divide_width():
    with pytest.raises(ValueError, match="divide"):
        AttentionBlock(6, 4, np.random.default_rng(0))


def test_single_token_weight_is_one():
    block = _block(d=4, heads=2, seed=1)
    x = Tensor(np.random.default_rng(2).standard_normal((2, 1, 4)))
    weights = block.attention_weights(x)
    np.testing.assert_array_equal(weights, np.ones((2, 2, 1, 1)))


def test_single_token_output_matches_oracle():
    block = _block(d=4, heads=1, seed=3)
    x = np.random.default_rng(4).standard_normal((1, 1, 4))
    out = block.forward(Tensor(x))
    # with one token, attention passes V through: LN(x + (x Wv) Wo)
    expected = _layer_norm_np(x + (x @ block.wv.data) @ block.wo.data)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_identical_tokens_give_uniform_rows():
    block = _block(d=4, heads=2, seed=5)
    token = np.random.default_rng(6).standard_normal(4)
    x = Tensor(np.tile(token, (1, 5, 1)))
    weights = block.attention_weights(x)
    np.testing.assert_allclose(weights, 0.2, atol=1e-12)


def test_two_token_identity_projection_hand_case():
    block = _block(d=2, heads=1, seed=7)
    for w in (block.wq, block.wk, block.wv, block.wo):
        w.data = np.eye(2)
    x = np.array([[[1.0, 0.5], [-0.5, 2.0]]])
    # hand: scores = x x^T / sqrt(2); softmax rows; weighted sum; +residual; LN
    scores = x[0] @ x[0].T / np.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    ctx = attn @ x[0]
    expected = _layer_norm_np(x[0] + ctx)

    weights = block.attention_weights(Tensor(x))
    np.testing.assert_allclose(weights[0, 0], attn, atol=1e-12)
    out = block.forward(Tensor(x))
    np.testing.assert_allclose(out.data[0], expected, atol=1e-12)


def test_rows_are_stochastic():
    block = _block(d=8, heads=4, seed=8)
    x = Tensor(np.random.default_rng(9).standard_normal((3, 6, 8)))
    weights = block.attention_weights(x)
    assert np.all(weights >= 0)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)


def test_channel_independence():
    block = _block(d=4, heads=2, seed=10)
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 5, 4))
    base = block.forward(Tensor(x)).data
    modified = x.copy()
    modified[1] = 0.0
    out = block.forward(Tensor(modified)).data
    np.testing.assert_array_equal(out[0], base[0])
    np.testing.assert_array_equal(out[2], base[2])
    assert not np.allclose(out[1], base[1])


def test_channel_permutation_equivariance():
    block = _block(d=4, heads=1, seed=12)
    x = np.random.default_rng(13).standard_normal((4, 3, 4))
    perm = np.array([3, 1, 0, 2])
    np.testing.assert_allclose(
        block.forward(Tensor(x)).data[perm],
        block.forward(Tensor(x[perm])).data,
        atol=0,
    )


def test_zero_output_projection_reduces_to_layer_norm():
    block = _block(d=4, heads=2, seed=14)
    block.wo.data = np.zeros((4, 4))
    x = np.random.default_rng(15).standard_normal((2, 5, 4))
    np.testing.assert_allclose(block.forward(Tensor(x)).data, _layer_norm_np(x), atol=1e-12)
