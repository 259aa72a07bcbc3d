"""Recurrent noisy router: a gated recurrent cell shared across all layers
drives per-token Gaussian score heads; top-k masking and a softmax turn the
scores into sparse gates.

The recurrence runs over layer depth, not time: the hidden state starts at
zero each forward pass and is updated once per layer with that layer's token
representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import uniform_init

TRAIN = "train"
EVAL = "eval"


@dataclass
class RouteDistribution:
    """Per-token routing scores and the Gaussian parameters behind them."""

    mu: Tensor
    sigma: Tensor
    epsilon: np.ndarray | None
    scores: Tensor


@dataclass
class GateMatrix:
    """Sparse gates: per token, exactly k selected experts with weights summing to 1.

    ``full`` is the differentiable (tokens x n_routed) matrix, exactly zero
    outside the selection; ``selected``/``weights`` are aligned (tokens x k)
    views with indices ascending.
    """

    full: Tensor
    selected: np.ndarray
    weights: np.ndarray

    @property
    def k(self) -> int:
        return self.selected.shape[1]

    @property
    def n_routed(self) -> int:
        return self.full.shape[1]


class RecurrentNoisyRouter:
    """Shared-across-layers router: GRU cell -> Gaussian heads -> noisy scores."""

    def __init__(self, d: int, n_routed: int, rng: np.random.Generator, name: str = "router"):
        self.d = d
        self.n_routed = n_routed
        self.name = name

        def par(shape, fan_in, suffix):
            return Tensor(uniform_init(rng, shape, fan_in), requires_grad=True, name=f"{name}.{suffix}")

        self.wz, self.uz, self.bz = par((d, d), d, "wz"), par((d, d), d, "uz"), par((d,), d, "bz")
        self.wr, self.ur, self.br = par((d, d), d, "wr"), par((d, d), d, "ur"), par((d,), d, "br")
        self.wc, self.uc, self.bc = par((d, d), d, "wc"), par((d, d), d, "uc"), par((d,), d, "bc")
        self.w_mu = par((d, n_routed), d, "w_mu")
        self.b_mu = par((n_routed,), d, "b_mu")
        self.w_sigma = par((d, n_routed), d, "w_sigma")
        self.b_sigma = par((n_routed,), d, "b_sigma")

    def parameters(self) -> list[Tensor]:
        return [
            self.wz, self.uz, self.bz,
            self.wr, self.ur, self.br,
            self.wc, self.uc, self.bc,
            self.w_mu, self.b_mu, self.w_sigma, self.b_sigma,
        ]

    def init_state(self, n_tokens: int) -> Tensor:
        return Tensor(np.zeros((n_tokens, self.d)))

    def step(self, state: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
        """One recurrent update; returns (output, new state), output == new state."""
        if state.shape != x.shape:
            raise ValueError(f"state shape {state.shape} != input shape {x.shape}")
        z = ad.sigmoid(x @ self.wz + state @ self.uz + self.bz)
        r = ad.sigmoid(x @ self.wr + state @ self.ur + self.br)
        candidate = ad.tanh(x @ self.wc + (r * state) @ self.uc + self.bc)
        new_state = (1.0 - z) * candidate + z * state
        return new_state, new_state

    def gaussian_heads(self, o: Tensor) -> tuple[Tensor, Tensor]:
        mu = o @ self.w_mu + self.b_mu
        sigma = ad.softplus(o @ self.w_sigma + self.b_sigma)
        return mu, sigma

    def scores(
        self,
        mu: Tensor,
        sigma: Tensor,
        mode: str,
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
    ) -> RouteDistribution:
        """Training resamples scores as mu + eps*sigma; inference returns mu exactly.

        ``noise`` overrides sampling (used to freeze or zero the perturbation);
        no generator is consumed in eval mode.
        """
        if mode == EVAL:
            return RouteDistribution(mu, sigma, None, mu)
        if mode != TRAIN:
            raise ValueError(f"unknown mode {mode!r}")
        if noise is None:
            if rng is None:
                raise ValueError("training-mode scores need an rng or explicit noise")
            noise = rng.standard_normal(mu.shape)
        else:
            noise = np.asarray(noise, dtype=np.float64)
            if noise.shape != mu.shape:
                raise ValueError("noise shape must match mu")
        h = mu + Tensor(noise) * sigma
        return RouteDistribution(mu, sigma, noise, h)


def keep_topk(v: np.ndarray, k: int) -> np.ndarray:
    """Array-level top-k mask to -inf along the last axis, ties to lowest index."""
    v = np.asarray(v, dtype=np.float64)
    mask = ad.topk_mask(v, k, axis=-1)
    return np.where(mask, v, -np.inf)


def build_gates(scores: Tensor, k: int) -> GateMatrix:
    """Per token: softmax over the k largest scores, zeros elsewhere."""
    if not np.isfinite(scores.data).all():
        raise ValueError("scores must be finite")
    masked = ad.keep_topk(scores, k, axis=-1)
    full = ad.softmax(masked, axis=-1)
    mask = ~np.isneginf(masked.data)
    n_tokens = scores.shape[0]
    selected = np.argsort(~mask, axis=1, kind="stable")[:, :k]
    selected.sort(axis=1)
    weights = np.take_along_axis(full.data, selected, axis=1)
    return GateMatrix(full, selected, weights)
