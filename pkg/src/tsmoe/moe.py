"""Shared plus routed feed-forward experts with sparse dispatch.

Shared experts see every token unweighted; routed experts see only the
tokens whose gates selected them, scaled by the gate weight. The layer ends
with a residual LayerNorm.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import uniform_init
from .router import GateMatrix


class FeedForwardExpert:
    """Two linear maps with a rectifier between: d -> d_ff -> d."""

    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, name: str):
        self.name = name
        self.w1 = Tensor(uniform_init(rng, (d, d_ff), d), requires_grad=True, name=f"{name}.w1")
        self.b1 = Tensor(uniform_init(rng, (d_ff,), d), requires_grad=True, name=f"{name}.b1")
        self.w2 = Tensor(uniform_init(rng, (d_ff, d), d_ff), requires_grad=True, name=f"{name}.w2")
        self.b2 = Tensor(uniform_init(rng, (d,), d_ff), requires_grad=True, name=f"{name}.b2")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class ExpertBank:
    """n_shared unconditional experts, n_routed gated experts, one LayerNorm."""

    def __init__(
        self,
        d: int,
        d_ff: int,
        n_shared: int,
        n_routed: int,
        rng: np.random.Generator,
        name: str = "moe",
    ):
        if n_routed < 1:
            raise ValueError("need at least one routed expert")
        if n_shared < 0:
            raise ValueError("shared expert count cannot be negative")
        self.d = d
        self.name = name
        self.shared = [
            FeedForwardExpert(d, d_ff, rng, f"{name}.shared{i}") for i in range(n_shared)
        ]
        self.routed = [
            FeedForwardExpert(d, d_ff, rng, f"{name}.routed{i}") for i in range(n_routed)
        ]
        self.ln_gamma = Tensor(np.ones(d), requires_grad=True, name=f"{name}.ln_gamma")
        self.ln_beta = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.ln_beta")

    @property
    def n_shared(self) -> int:
        return len(self.shared)

    @property
    def n_routed(self) -> int:
        return len(self.routed)

    def parameters(self) -> list[Tensor]:
        out = []
        for expert in self.shared + self.routed:
            out.extend(expert.parameters())
        out.extend([self.ln_gamma, self.ln_beta])
        return out


def moe_layer_forward(x: Tensor, gates: GateMatrix, bank: ExpertBank) -> Tensor:
    """Sparse MoE layer: residual LayerNorm of shared + gated routed outputs.

    Only experts actually selected by at least one token are evaluated.
    """
    if gates.n_routed != bank.n_routed:
        raise ValueError(
            f"gate expert count {gates.n_routed} != bank expert count {bank.n_routed}"
        )
    n_tokens = x.shape[0]
    combined = Tensor(np.zeros_like(x.data))
    for expert in bank.shared:
        combined = combined + expert.forward(x)
    for i, expert in enumerate(bank.routed):
        rows = np.nonzero(gates.full.data[:, i] > 0.0)[0]
        if rows.size == 0:
            continue
        inp = ad.gather_rows(x, rows)
        weight = ad.reshape(ad.gather_pairs(gates.full, rows, np.full(rows.size, i)), (-1, 1))
        combined = ad.scatter_add_rows(combined, rows, expert.forward(inp) * weight)
    return ad.layer_norm(x + combined, bank.ln_gamma, bank.ln_beta)


def moe_layer_forward_dense(x: Tensor, gates: GateMatrix, bank: ExpertBank) -> Tensor:
    """Reference path evaluating every routed expert on every token."""
    if gates.n_routed != bank.n_routed:
        raise ValueError("gate/bank expert count mismatch")
    n_tokens = x.shape[0]
    all_rows = np.arange(n_tokens)
    combined = Tensor(np.zeros_like(x.data))
    for expert in bank.shared:
        combined = combined + expert.forward(x)
    for i, expert in enumerate(bank.routed):
        col = ad.reshape(ad.gather_pairs(gates.full, all_rows, np.full(n_tokens, i)), (-1, 1))
        combined = combined + expert.forward(x) * col
    return ad.layer_norm(x + combined, bank.ln_gamma, bank.ln_beta)
