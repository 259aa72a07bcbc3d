"""Balance losses against an independent quadruple-loop implementation."""

import numpy as np
import pytest

from tsmoe.autodiff import Tape, Tensor
from tsmoe.balance import channel_balance_loss, combine, temporal_balance_loss


def naive_balance_losses(scores: np.ndarray, n_channels: int, n_patches: int, k: int):
    """Literal loops over the channel/temporal loss definitions; tokens are
    channel-major (row c*n + q), softmax per token over experts, ties to the
    lowest expert index."""
    n_routed = scores.shape[1]

    def softmax(v):
        e = np.exp(v - v.max())
        return e / e.sum()

    def topk_set(v):
        order = np.argsort(-v, kind="stable")
        return set(order[:k])

    l_cha = 0.0
    for p in range(n_patches):
        s = np.zeros((n_routed, n_channels))
        for t in range(n_channels):
            s[:, t] = softmax(scores[t * n_patches + p])
        for i in range(n_routed):
            freq = 0.0
            for t in range(n_channels):
                if i in topk_set(s[:, t]):
                    freq += 1.0
            freq *= n_routed / (k * n_channels)
            mean_prob = s[i, :].sum() / n_channels
            l_cha += freq * mean_prob
    l_tem = 0.0
    for t in range(n_channels):
        s = np.zeros((n_routed, n_patches))
        for p in range(n_patches):
            s[:, p] = softmax(scores[t * n_patches + p])
        for i in range(n_routed):
            freq = 0.0
            for p in range(n_patches):
                if i in topk_set(s[:, p]):
                    freq += 1.0
            freq *= n_routed / (k * n_patches)
            mean_prob = s[i, :].sum() / n_patches
            l_tem += freq * mean_prob
    return l_cha, l_tem


def test_brute_force_equivalence_on_small_instances():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 150:
        n_ch = int(rng.integers(1, 4))
        n_p = int(rng.integers(1, 4))
        n_routed = int(rng.integers(1, 4))
        k = int(rng.integers(1, min(n_routed, 2) + 1))
        scores = rng.standard_normal((n_ch * n_p, n_routed))
        l_cha, _ = channel_balance_loss(Tensor(scores), n_ch, n_p, k)
        l_tem, _ = temporal_balance_loss(Tensor(scores), n_ch, n_p, k)
        naive_cha, naive_tem = naive_balance_losses(scores, n_ch, n_p, k)
        assert abs(float(l_cha.data) - naive_cha) < 1e-10
        assert abs(float(l_tem.data) - naive_tem) < 1e-10
        checked += 1


def test_single_expert_closed_forms():
    rng = np.random.default_rng(1)
    for n_ch, n_p in ((1, 1), (2, 5), (4, 3)):
        scores = Tensor(rng.standard_normal((n_ch * n_p, 1)))
        l_cha, terms_c = channel_balance_loss(scores, n_ch, n_p, 1)
        l_tem, terms_t = temporal_balance_loss(scores, n_ch, n_p, 1)
        assert float(l_cha.data) == float(n_p)
        assert float(l_tem.data) == float(n_ch)
        assert np.all(terms_c.f_cha == 1.0)
        assert np.all(terms_t.f_tem == 1.0)


def test_uniform_scores_hand_case():
    # N_r=4, k=1, N=4, n=2; ties route every token to expert 0
    scores = Tensor(np.zeros((8, 4)))
    l_cha, terms = channel_balance_loss(scores, 4, 2, 1)
    assert float(l_cha.data) == 2.0
    np.testing.assert_array_equal(terms.f_cha[0], [4.0, 4.0])
    np.testing.assert_array_equal(terms.f_cha[1:], 0.0)
    np.testing.assert_allclose(terms.p_cha, 0.25, atol=0)


def test_concentrated_routing_maximizes_channel_loss():
    concentrated = np.full((8, 4), -50.0)
    concentrated[:, 2] = 50.0
    l_conc, _ = channel_balance_loss(Tensor(concentrated), 4, 2, 1)
    np.testing.assert_allclose(float(l_conc.data), 4.0 * 2, atol=1e-9)
    l_unif, _ = channel_balance_loss(Tensor(np.zeros((8, 4))), 4, 2, 1)
    assert float(l_conc.data) > float(l_unif.data)


def test_spread_assignment_minimizes_temporal_loss_by_enumeration():
    # N=1, n=4, N_r=4, k=1: brute force over all 4^4 assignments
    def scores_for(assignment):
        scores = np.full((4, 4), -10.0)
        for q, e in enumerate(assignment):
            scores[q, e] = 10.0
        return scores

    losses = {}
    for code in range(4**4):
        assignment = tuple((code // 4**q) % 4 for q in range(4))
        _, naive_tem = naive_balance_losses(scores_for(assignment), 1, 4, 1)
        losses[assignment] = naive_tem
    minimum = min(losses.values())
    spread = [a for a, v in losses.items() if abs(v - minimum) < 1e-12]
    assert all(len(set(a)) == 4 for a in spread)  # minima are the permutations
    single = losses[(0, 0, 0, 0)]
    assert single >= max(losses.values()) - 1e-9
    # implementation agrees on both extremes
    for assignment in ((0, 1, 2, 3), (0, 0, 0, 0)):
        l_tem, _ = temporal_balance_loss(Tensor(scores_for(assignment)), 1, 4, 1)
        assert abs(float(l_tem.data) - losses[assignment]) < 1e-10
    assert losses[(0, 1, 2, 3)] < single


def test_swap_symmetry_between_losses():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n_ch, n_p, n_routed, k = 3, 3, 3, 2
        scores = rng.standard_normal((n_ch * n_p, n_routed))
        swapped = np.empty_like(scores)
        for c in range(n_ch):
            for q in range(n_p):
                swapped[q * n_ch + c] = scores[c * n_p + q]
        l_tem, _ = temporal_balance_loss(Tensor(scores), n_ch, n_p, k)
        l_cha_swapped, _ = channel_balance_loss(Tensor(swapped), n_p, n_ch, k)
        assert abs(float(l_tem.data) - float(l_cha_swapped.data)) < 1e-12


def test_per_token_shift_invariance():
    rng = np.random.default_rng(3)
    scores = rng.standard_normal((12, 5))
    shifts = rng.uniform(-4.0, 4.0, size=(12, 1))
    a, _ = channel_balance_loss(Tensor(scores), 3, 4, 2)
    b, _ = channel_balance_loss(Tensor(scores + shifts), 3, 4, 2)
    assert abs(float(a.data) - float(b.data)) < 1e-9


def test_terms_field_invariants():
    rng = np.random.default_rng(6)
    n_ch, n_p, n_routed, k = 3, 4, 5, 2
    scores = Tensor(rng.standard_normal((n_ch * n_p, n_routed)))
    _, terms_c = channel_balance_loss(scores, n_ch, n_p, k)
    _, terms_t = temporal_balance_loss(scores, n_ch, n_p, k)
    # each token's softmax over experts sums to 1
    np.testing.assert_allclose(terms_c.s_cha.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(terms_t.s_tem.sum(axis=1), 1.0, atol=1e-9)
    # frequencies are nonnegative; per group, k selections per token scaled
    # by N_r/(k * group size) sum to exactly N_r over the expert axis
    assert terms_c.f_cha.min() >= 0.0 and terms_t.f_tem.min() >= 0.0
    np.testing.assert_allclose(terms_c.f_cha.sum(axis=0), n_routed, atol=1e-9)
    np.testing.assert_allclose(terms_t.f_tem.sum(axis=0), n_routed, atol=1e-9)
    # mean probabilities are distributions over experts within each group
    np.testing.assert_allclose(terms_c.p_cha.sum(axis=0), 1.0, atol=1e-9)
    np.testing.assert_allclose(terms_t.p_tem.sum(axis=0), 1.0, atol=1e-9)


def test_nonnegativity():
    rng = np.random.default_rng(4)
    for _ in range(20):
        scores = Tensor(rng.standard_normal((6, 4)) * 5.0)
        l_cha, _ = channel_balance_loss(scores, 2, 3, 2)
        l_tem, _ = temporal_balance_loss(scores, 2, 3, 2)
        assert float(l_cha.data) >= 0.0
        assert float(l_tem.data) >= 0.0


def test_combine_examples_and_errors():
    assert combine(3.0, 2.0, 0.0, 0.5) == 1.0
    assert combine(3.0, 2.0, 0.0, 0.0) == 0.0
    assert abs(combine(3.0, 2.0, 0.01, 0.01) - 0.05) < 1e-15
    with pytest.raises(ValueError, match="nonnegative"):
        combine(1.0, 1.0, -0.1, 0.0)


def test_gradient_flows_through_mean_probabilities_only():
    scores = Tensor(np.random.default_rng(5).standard_normal((6, 3)),
                    requires_grad=True, name="scores")
    with Tape() as tape:
        l_cha, _ = channel_balance_loss(scores, 2, 3, 1)
        l_tem, _ = temporal_balance_loss(scores, 2, 3, 1)
        tape.backward(combine(l_tem, l_cha, 0.5, 0.5))
    assert scores.grad is not None
    assert np.isfinite(scores.grad).all()


def test_layout_mismatch_rejected():
    with pytest.raises(ValueError, match="channels\\*patches"):
        channel_balance_loss(Tensor(np.zeros((5, 3))), 2, 3, 1)
    with pytest.raises(ValueError, match="exceeds"):
        temporal_balance_loss(Tensor(np.zeros((6, 3))), 2, 3, 4)
