"""Channel and temporal load-balancing losses over raw routing scores.

Both losses share the same per-token ingredients: a softmax over the expert
axis and a top-k selection mask. They differ only in the grouping: the
channel loss aggregates the N tokens that share a patch position, the
temporal loss aggregates the n tokens that share a channel. Gradients flow
through the mean probabilities only; the selection frequencies are constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class BalanceTerms:
    """Intermediate quantities of the two balance losses (arrays are constants).

    Channel side: s_cha[p] is the n_routed x N softmaxed score matrix at patch
    position p, f_cha/p_cha are n_routed x n. Temporal side mirrors with the
    channel axis: s_tem[t] is n_routed x n, f_tem/p_tem are n_routed x N.
    """

    s_cha: np.ndarray | None = None
    f_cha: np.ndarray | None = None
    p_cha: np.ndarray | None = None
    l_cha: float | None = None
    s_tem: np.ndarray | None = None
    f_tem: np.ndarray | None = None
    p_tem: np.ndarray | None = None
    l_tem: float | None = None
    alpha: float | None = None
    beta: float | None = None
    l_bal: float | None = None


def _token_views(scores: Tensor, n_channels: int, n_patches: int, k: int):
    n_tokens, n_routed = scores.shape
    if n_tokens != n_channels * n_patches:
        raise ValueError(
            f"score rows {n_tokens} != channels*patches {n_channels * n_patches}"
        )
    if k > n_routed:
        raise ValueError(f"k ({k}) exceeds expert count ({n_routed})")
    probs = ad.softmax(scores, axis=-1)
    mask = ad.topk_mask(scores.data, k, axis=-1)
    probs3 = ad.reshape(probs, (n_channels, n_patches, n_routed))
    mask3 = mask.reshape(n_channels, n_patches, n_routed)
    return probs3, mask3, n_routed


def channel_balance_loss(
    scores: Tensor, n_channels: int, n_patches: int, k: int
) -> tuple[Tensor, BalanceTerms]:
    """Imbalance along channels: sum over patch positions of f_i,p * P_i,p."""
    probs3, mask3, n_routed = _token_views(scores, n_channels, n_patches, k)
    freq = mask3.sum(axis=0).T * (n_routed / (k * n_channels))  # n_routed x n
    mean_prob = ad.tsum(probs3, axis=0) * (1.0 / n_channels)  # n x n_routed
    loss = ad.tsum(mean_prob * Tensor(freq.T))
    terms = BalanceTerms(
        s_cha=np.transpose(probs3.data, (1, 2, 0)),  # per p: n_routed x N
        f_cha=freq,
        p_cha=mean_prob.data.T.copy(),
        l_cha=float(loss.data),
    )
    return loss, terms


def temporal_balance_loss(
    scores: Tensor, n_channels: int, n_patches: int, k: int
) -> tuple[Tensor, BalanceTerms]:
    """Imbalance along time: sum over channels of f_i,t * P_i,t."""
    probs3, mask3, n_routed = _token_views(scores, n_channels, n_patches, k)
    freq = mask3.sum(axis=1).T * (n_routed / (k * n_patches))  # n_routed x N
    mean_prob = ad.tsum(probs3, axis=1) * (1.0 / n_patches)  # N x n_routed
    loss = ad.tsum(mean_prob * Tensor(freq.T))
    terms = BalanceTerms(
        s_tem=np.transpose(probs3.data, (0, 2, 1)),  # per t: n_routed x n
        f_tem=freq,
        p_tem=mean_prob.data.T.copy(),
        l_tem=float(loss.data),
    )
    return loss, terms


def combine(l_tem, l_cha, alpha: float, beta: float):
    """Weighted sum alpha*L_tem + beta*L_cha; coefficients must be nonnegative."""
    if alpha < 0 or beta < 0:
        raise ValueError("balance coefficients must be nonnegative")
    return l_tem * alpha + l_cha * beta


def merge_terms(channel: BalanceTerms, temporal: BalanceTerms, alpha: float, beta: float) -> BalanceTerms:
    return BalanceTerms(
        s_cha=channel.s_cha,
        f_cha=channel.f_cha,
        p_cha=channel.p_cha,
        l_cha=channel.l_cha,
        s_tem=temporal.s_tem,
        f_tem=temporal.f_tem,
        p_tem=temporal.p_tem,
        l_tem=temporal.l_tem,
        alpha=alpha,
        beta=beta,
        l_bal=alpha * temporal.l_tem + beta * channel.l_cha,
    )
