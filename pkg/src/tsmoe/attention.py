"""Channel-independent multi-head self-attention with post-norm residual."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class AttentionBlock:
    """One residual block: LayerNorm(x + MSA(x)), attention within each channel.

    Query/key/value projections are stored fused as d x d matrices whose
    columns group by head; each head's slice is d x (d/heads).
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, name: str = "attn"):
        if d % heads != 0:
            raise ValueError(f"heads ({heads}) must divide model width ({d})")
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        self.name = name
        self.wq = Tensor(uniform_init(rng, (d, d), d), requires_grad=True, name=f"{name}.wq")
        self.wk = Tensor(uniform_init(rng, (d, d), d), requires_grad=True, name=f"{name}.wk")
        self.wv = Tensor(uniform_init(rng, (d, d), d), requires_grad=True, name=f"{name}.wv")
        self.wo = Tensor(uniform_init(rng, (d, d), d), requires_grad=True, name=f"{name}.wo")
        self.ln_gamma = Tensor(np.ones(d), requires_grad=True, name=f"{name}.ln_gamma")
        self.ln_beta = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.ln_beta")

    def parameters(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo, self.ln_gamma, self.ln_beta]

    def _split_heads(self, x: Tensor, n_ch: int, n: int) -> Tensor:
        # (N, n, d) -> (N, heads, n, d_head)
        x = ad.reshape(x, (n_ch, n, self.heads, self.d_head))
        return ad.transpose(x, (0, 2, 1, 3))

    def _attend(self, x: Tensor):
        n_ch, n, d = x.shape
        if d != self.d:
            raise ValueError(f"expected width {self.d}, got {d}")
        q = self._split_heads(x @ self.wq, n_ch, n)
        k = self._split_heads(x @ self.wk, n_ch, n)
        v = self._split_heads(x @ self.wv, n_ch, n)
        scores = q @ ad.transpose(k, (0, 1, 3, 2)) * (1.0 / np.sqrt(self.d_head))
        weights = ad.softmax(scores, axis=-1)
        ctx = weights @ v  # (N, heads, n, d_head)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n_ch, n, d))
        return ctx @ self.wo, weights

    def forward(self, x: Tensor) -> Tensor:
        attended, _ = self._attend(x)
        return ad.layer_norm(x + attended, self.ln_gamma, self.ln_beta)

    def attention_weights(self, x: Tensor) -> np.ndarray:
        """Per-channel, per-head n x n attention matrices (diagnostic)."""
        with ad.no_grad():
            _, weights = self._attend(x)
        return weights.data
