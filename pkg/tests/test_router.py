"""Recurrent router: cell arithmetic, Gaussian heads, noisy scores, gates."""

import math

import numpy as np
import pytest

from tsmoe.autodiff import Tensor
from tsmoe.gradcheck import grad_check, all_pass
from tsmoe.router import (
    EVAL,
    TRAIN,
    RecurrentNoisyRouter,
    build_gates,
    keep_topk,
)
from tsmoe import autodiff as ad


def _router(d=4, n_routed=3, seed=0):
    return RecurrentNoisyRouter(d, n_routed, np.random.default_rng(seed))


def _zero_params(router):
    for p in router.parameters():
        p.data = np.zeros_like(p.data)


def test_step_with_zero_parameters_halves_state():
    router = _router()
    _zero_params(router)
    h = Tensor(np.random.default_rng(1).standard_normal((5, 4)))
    x = Tensor(np.random.default_rng(2).standard_normal((5, 4)))
    out, new_h = router.step(h, x)
    np.testing.assert_allclose(out.data, 0.5 * h.data, atol=1e-15)
    zero_out, _ = router.step(Tensor(np.zeros((5, 4))), x)
    np.testing.assert_array_equal(zero_out.data, 0.0)


def test_step_one_dim_two_layer_hand_trace():
    router = _router(d=1, n_routed=2, seed=3)
    vals = {"wz": 0.5, "uz": -0.3, "bz": 0.1, "wr": 0.2, "ur": 0.4, "br": -0.2,
            "wc": 1.0, "uc": 0.7, "bc": 0.05}
    for name, v in vals.items():
        getattr(router, name).data = np.full_like(getattr(router, name).data, v)

    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    def step(h, x):
        z = sigmoid(vals["wz"] * x + vals["uz"] * h + vals["bz"])
        r = sigmoid(vals["wr"] * x + vals["ur"] * h + vals["br"])
        c = math.tanh(vals["wc"] * x + vals["uc"] * r * h + vals["bc"])
        return (1.0 - z) * c + z * h

    x_value = 0.8
    h1 = step(0.0, x_value)
    h2 = step(h1, x_value)
    assert h1 != h2  # state evolves across layers for the same input

    state = router.init_state(1)
    x = Tensor(np.array([[x_value]]))
    out1, state = router.step(state, x)
    out2, state = router.step(state, x)
    np.testing.assert_allclose(out1.data, [[h1]], atol=1e-12)
    np.testing.assert_allclose(out2.data, [[h2]], atol=1e-12)


def test_step_determinism_and_shape_check():
    router = _router()
    h = Tensor(np.random.default_rng(4).standard_normal((3, 4)))
    x = Tensor(np.random.default_rng(5).standard_normal((3, 4)))
    a, _ = router.step(h, x)
    b, _ = router.step(h, x)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(ValueError, match="shape"):
        router.step(Tensor(np.zeros((2, 4))), x)


def test_gaussian_heads_biases_and_softplus():
    router = _router(d=4, n_routed=3)
    _zero_params(router)
    router.b_mu.data = np.array([1.0, -2.0, 0.5])
    mu, sigma = router.gaussian_heads(Tensor(np.zeros((2, 4))))
    np.testing.assert_array_equal(mu.data, np.tile([1.0, -2.0, 0.5], (2, 1)))
    np.testing.assert_allclose(sigma.data, math.log(2.0), atol=1e-15)


def test_sigma_strictly_positive():
    router = _router(d=4, n_routed=5, seed=6)
    o = Tensor(np.random.default_rng(7).standard_normal((10_000, 4)) * 10.0)
    _, sigma = router.gaussian_heads(o)
    assert sigma.data.min() > 0.0


def test_gaussian_head_one_dim_hand_case():
    router = _router(d=1, n_routed=1, seed=8)
    _zero_params(router)
    router.w_mu.data = np.array([[1.75]])
    mu, _ = router.gaussian_heads(Tensor(np.array([[0.4]])))
    np.testing.assert_allclose(mu.data, [[0.7]], atol=1e-15)


def test_scores_inference_is_exactly_mu():
    router = _router()
    o = Tensor(np.random.default_rng(9).standard_normal((6, 4)))
    mu, sigma = router.gaussian_heads(o)
    dist = router.scores(mu, sigma, EVAL)
    assert np.array_equal(dist.scores.data, mu.data)
    assert dist.epsilon is None


def test_scores_training_with_zero_noise_equals_mu():
    router = _router()
    o = Tensor(np.random.default_rng(10).standard_normal((6, 4)))
    mu, sigma = router.gaussian_heads(o)
    dist = router.scores(mu, sigma, TRAIN, noise=np.zeros(mu.shape))
    assert np.array_equal(dist.scores.data, mu.data)


def test_scores_training_noise_statistics():
    router = _router(d=2, n_routed=1)
    _zero_params(router)
    router.b_sigma.data = np.array([math.log(math.e - 1.0)])  # softplus -> 1.0
    n = 100_000
    mu, sigma = router.gaussian_heads(Tensor(np.zeros((n, 2))))
    dist = router.scores(mu, sigma, TRAIN, rng=np.random.default_rng(11))
    samples = dist.scores.data.ravel()
    assert abs(samples.mean()) < 0.01
    assert abs(samples.var() - 1.0) < 0.02


def test_scores_requires_rng_in_training():
    router = _router()
    mu, sigma = router.gaussian_heads(Tensor(np.zeros((2, 4))))
    with pytest.raises(ValueError, match="rng"):
        router.scores(mu, sigma, TRAIN)
    with pytest.raises(ValueError, match="mode"):
        router.scores(mu, sigma, "predict")


def test_keep_topk_examples():
    out = keep_topk(np.array([0.1, 0.5, 0.3, 0.2]), 2)
    np.testing.assert_array_equal(out, [-np.inf, 0.5, 0.3, -np.inf])
    v = np.array([1.0, -2.0, 0.0])
    np.testing.assert_array_equal(keep_topk(v, 3), v)
    out = keep_topk(np.array([0.5, 0.5, 0.1]), 1)
    np.testing.assert_array_equal(out, [0.5, -np.inf, -np.inf])
    with pytest.raises(ValueError):
        keep_topk(v, 4)


def test_build_gates_single_expert():
    gates = build_gates(Tensor(np.random.default_rng(12).standard_normal((7, 5))), 1)
    assert np.all(gates.weights == 1.0)
    assert gates.selected.shape == (7, 1)


def test_build_gates_hand_softmax():
    gates = build_gates(Tensor(np.array([[0.5, 0.3, 0.1, -0.2]])), 2)
    np.testing.assert_array_equal(gates.selected[0], [0, 1])
    e0, e1 = math.exp(0.5), math.exp(0.3)
    np.testing.assert_allclose(gates.weights[0], [e0 / (e0 + e1), e1 / (e0 + e1)], atol=1e-12)
    np.testing.assert_allclose(gates.weights[0], [0.5499, 0.4501], atol=1e-4)


def test_build_gates_uniform_tie():
    gates = build_gates(Tensor(np.zeros((1, 4))), 2)
    np.testing.assert_array_equal(gates.selected[0], [0, 1])
    np.testing.assert_array_equal(gates.weights[0], [0.5, 0.5])


def test_gate_support_invariants():
    rng = np.random.default_rng(13)
    scores = Tensor(rng.standard_normal((500, 8)))
    gates = build_gates(scores, 3)
    full = gates.full.data
    assert ((full > 0).sum(axis=1) == 3).all()
    np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-9)
    # unselected experts are exactly zero
    mask = np.zeros_like(full, dtype=bool)
    np.put_along_axis(mask, gates.selected, True, axis=1)
    assert np.all(full[~mask] == 0.0)
    # selected indices ascending
    assert np.all(np.diff(gates.selected, axis=1) > 0)


def test_build_gates_rejects_nonfinite_scores():
    with pytest.raises(ValueError, match="finite"):
        build_gates(Tensor(np.array([[np.inf, 0.0]])), 1)


def test_monotone_selection():
    rng = np.random.default_rng(14)
    for _ in range(50):
        scores = rng.standard_normal((4, 6))
        gates = build_gates(Tensor(scores), 2)
        for token in range(4):
            for expert in gates.selected[token]:
                bumped = scores.copy()
                bumped[token, expert] += rng.uniform(0.0, 3.0)
                new = build_gates(Tensor(bumped), 2)
                assert expert in new.selected[token]


def test_gradient_flows_through_router_composition():
    router = _router(d=3, n_routed=4, seed=15)
    x = np.random.default_rng(16).standard_normal((5, 3))
    noise = np.random.default_rng(17).standard_normal((5, 4))
    weights = np.random.default_rng(18).standard_normal((5, 4))

    def objective():
        state = router.init_state(5)
        o, _ = router.step(state, Tensor(x))
        mu, sigma = router.gaussian_heads(o)
        dist = router.scores(mu, sigma, TRAIN, noise=noise)
        gates = build_gates(dist.scores, 2)
        return ad.tsum(gates.full * Tensor(weights))

    reports = grad_check(objective, router.parameters(), rel_tol=1e-6)
    assert all_pass(reports, 1e-6), [(r.name, r.max_rel_err) for r in reports]
