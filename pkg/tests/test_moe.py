"""Expert bank and sparse dispatch."""

import numpy as np
import pytest

from tsmoe.autodiff import Tensor
from tsmoe.moe import ExpertBank, FeedForwardExpert, moe_layer_forward, moe_layer_forward_dense
from tsmoe.router import build_gates


def _layer_norm_np(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _expert(d, d_ff, seed=0, name="e"):
    return FeedForwardExpert(d, d_ff, np.random.default_rng(seed), name)


def _zero(expert):
    for p in expert.parameters():
        p.data = np.zeros_like(p.data)


def test_expert_zero_weights_yield_output_bias():
    expert = _expert(3, 6)
    _zero(expert)
    expert.b2.data = np.array([1.0, -2.0, 0.5])
    out = expert.forward(Tensor(np.random.default_rng(1).standard_normal((4, 3))))
    np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0, 0.5], (4, 1)))


def test_expert_rectifier_kills_negative_preactivation():
    expert = _expert(2, 4)
    _zero(expert)
    expert.w1.data = np.ones((2, 4))
    expert.b1.data = np.full(4, -100.0)  # always negative pre-activation
    expert.w2.data = np.ones((4, 2))
    expert.b2.data = np.array([3.0, -1.0])
    out = expert.forward(Tensor(np.abs(np.random.default_rng(2).standard_normal((5, 2)))))
    np.testing.assert_array_equal(out.data, np.tile([3.0, -1.0], (5, 1)))


def test_expert_one_dim_hand_trace():
    expert = _expert(1, 1)
    expert.w1.data = np.array([[2.0]])
    expert.b1.data = np.zeros(1)
    expert.w2.data = np.array([[3.0]])
    expert.b2.data = np.zeros(1)
    assert expert.forward(Tensor([[1.0]])).data[0, 0] == 6.0
    assert expert.forward(Tensor([[-1.0]])).data[0, 0] == 0.0


def _bank(d=4, d_ff=8, n_shared=1, n_routed=3, seed=3):
    return ExpertBank(d, d_ff, n_shared, n_routed, np.random.default_rng(seed))


def test_bank_validation():
    with pytest.raises(ValueError):
        ExpertBank(4, 8, 0, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ExpertBank(4, 8, -1, 2, np.random.default_rng(0))


def test_zeroed_routed_experts_leave_shared_plus_residual():
    bank = _bank()
    for expert in bank.routed:
        _zero(expert)
    x = np.random.default_rng(4).standard_normal((6, 4))
    gates = build_gates(Tensor(np.random.default_rng(5).standard_normal((6, 3))), 2)
    out = moe_layer_forward(Tensor(x), gates, bank)
    shared_np = bank.shared[0].forward(Tensor(x)).data
    np.testing.assert_allclose(out.data, _layer_norm_np(x + shared_np), atol=1e-12)


def test_single_routed_expert_is_dense_ffn():
    bank = ExpertBank(4, 8, 0, 1, np.random.default_rng(6))
    x = np.random.default_rng(7).standard_normal((5, 4))
    gates = build_gates(Tensor(np.random.default_rng(8).standard_normal((5, 1))), 1)
    assert np.all(gates.weights == 1.0)
    out = moe_layer_forward(Tensor(x), gates, bank)
    ffn = bank.routed[0].forward(Tensor(x)).data
    np.testing.assert_allclose(out.data, _layer_norm_np(x + ffn), atol=1e-12)


def test_equal_gates_average_expert_outputs():
    bank = ExpertBank(4, 8, 0, 2, np.random.default_rng(9))
    x = np.random.default_rng(10).standard_normal((5, 4))
    gates = build_gates(Tensor(np.zeros((5, 2))), 2)  # tie -> 0.5 / 0.5
    out = moe_layer_forward(Tensor(x), gates, bank)
    a = bank.routed[0].forward(Tensor(x)).data
    b = bank.routed[1].forward(Tensor(x)).data
    np.testing.assert_allclose(out.data, _layer_norm_np(x + (a + b) / 2.0), atol=1e-12)


def test_sparse_equals_dense():
    rng = np.random.default_rng(11)
    bank = _bank(n_shared=2, n_routed=5)
    x = Tensor(rng.standard_normal((20, 4)))
    gates = build_gates(Tensor(rng.standard_normal((20, 5))), 2)
    sparse = moe_layer_forward(x, gates, bank)
    dense = moe_layer_forward_dense(x, gates, bank)
    np.testing.assert_allclose(sparse.data, dense.data, atol=1e-12)


def test_token_independence():
    rng = np.random.default_rng(12)
    bank = _bank()
    x = rng.standard_normal((8, 4))
    scores = rng.standard_normal((8, 3))
    base = moe_layer_forward(Tensor(x), build_gates(Tensor(scores), 2), bank).data
    bumped = x.copy()
    bumped[3] += 1.0
    out = moe_layer_forward(Tensor(bumped), build_gates(Tensor(scores), 2), bank).data
    unchanged = [i for i in range(8) if i != 3]
    np.testing.assert_array_equal(out[unchanged], base[unchanged])
    assert not np.allclose(out[3], base[3])


def test_all_expert_outputs_zero_gives_layer_norm():
    bank = _bank()
    for expert in bank.shared + bank.routed:
        _zero(expert)
    x = np.random.default_rng(13).standard_normal((6, 4))
    gates = build_gates(Tensor(np.random.default_rng(14).standard_normal((6, 3))), 1)
    out = moe_layer_forward(Tensor(x), gates, bank)
    np.testing.assert_allclose(out.data, _layer_norm_np(x), atol=1e-12)


def test_gate_bank_mismatch():
    bank = _bank(n_routed=3)
    gates = build_gates(Tensor(np.zeros((4, 5))), 2)
    with pytest.raises(ValueError, match="expert count"):
        moe_layer_forward(Tensor(np.zeros((4, 4))), gates, bank)
