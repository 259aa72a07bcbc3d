"""Full model: stacked attention + MoE layers with a shared recurrent router,
four task heads, loss composition, and representation diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import AttentionBlock, uniform_init
from .balance import BalanceTerms, channel_balance_loss, combine, merge_terms, temporal_balance_loss
from .moe import ExpertBank, moe_layer_forward
from .preprocess import (
    NormStats,
    SeriesBatch,
    patch_layout,
    patchify_t,
    embed_t,
    revin_denormalize_t,
    revin_normalize_t,
)
from .router import EVAL, GateMatrix, RecurrentNoisyRouter, RouteDistribution, build_gates

TASKS = ("forecast", "impute", "anomaly", "classify")


@dataclass
class ModelConfig:
    """All hyperparameters; the expert-count and depth defaults follow the
    common setting the architecture was tuned for (L=3, 10 routed experts,
    top-3 gates, 1 shared expert, patch length 24)."""

    task: str = "forecast"
    n_channels: int = 1
    lookback: int = 96
    horizon: int = 48
    num_classes: int = 2
    patch_len: int = 24
    patch_stride: int = 0  # 0 means: equal to patch_len (non-overlapping)
    d_model: int = 32
    heads: int = 4
    layers: int = 3
    n_routed: int = 10
    n_shared: int = 1
    top_k: int = 3
    d_ff: int = 0  # 0 means: 2 * d_model
    alpha: float = 0.01
    beta: float = 0.01
    revin_eps: float = 1e-5
    ln_eps: float = 1e-5
    task_loss: str = "l2"
    seed: int = 0

    @property
    def stride(self) -> int:
        return self.patch_stride if self.patch_stride else self.patch_len

    @property
    def expert_width(self) -> int:
        return self.d_ff if self.d_ff else 2 * self.d_model

    @property
    def n_patches(self) -> int:
        return patch_layout(self.lookback, self.patch_len, self.stride)[1]

    def validate(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.top_k > self.n_routed:
            raise ValueError(f"top_k ({self.top_k}) exceeds n_routed ({self.n_routed})")
        if self.top_k < 1 or self.n_routed < 1:
            raise ValueError("top_k and n_routed must be >= 1")
        if self.n_shared < 0:
            raise ValueError("n_shared cannot be negative")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("balance coefficients must be nonnegative")
        if not 1 <= self.stride <= self.patch_len:
            raise ValueError("patch stride must satisfy 1 <= stride <= patch_len")
        if self.task == "forecast" and self.horizon < 1:
            raise ValueError("forecast task needs horizon >= 1")
        if self.task == "classify" and self.num_classes < 2:
            raise ValueError("classification needs at least 2 classes")
        if self.task_loss not in ("l1", "l2"):
            raise ValueError("task_loss must be 'l1' or 'l2'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardTrace:
    """Everything one forward pass produced, layer by layer."""

    mode: str
    stats: NormStats
    layer_tokens: list[Tensor]  # post-attention representations, length L
    gates: list[GateMatrix]
    balance: list[BalanceTerms]
    balance_losses: list[tuple[Tensor, Tensor]]  # (temporal, channel) per layer
    distributions: list[RouteDistribution]
    final: Tensor
    output: Tensor
    observed: np.ndarray | None = None
    noise: list[np.ndarray | None] = field(default_factory=list)


class TSMoE:
    """Patch-tokenized channel-independent transformer with MoE feed-forwards."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        p = config.patch_len
        n = config.n_patches
        n_ch = config.n_channels

        self.revin_gamma = Tensor(np.ones(n_ch), requires_grad=True, name="revin.gamma")
        self.revin_beta = Tensor(np.zeros(n_ch), requires_grad=True, name="revin.beta")
        self.embed_w = Tensor(uniform_init(rng, (p, d), p), requires_grad=True, name="embed.weight")
        self.embed_b = Tensor(uniform_init(rng, (d,), p), requires_grad=True, name="embed.bias")
        self.pos = Tensor(uniform_init(rng, (n, d), d), requires_grad=True, name="embed.pos")
        self.router = RecurrentNoisyRouter(d, config.n_routed, rng)
        self.blocks = [
            AttentionBlock(d, config.heads, rng, name=f"layer{l}.attn")
            for l in range(config.layers)
        ]
        self.banks = [
            ExpertBank(d, config.expert_width, config.n_shared, config.n_routed, rng,
                       name=f"layer{l}.moe")
            for l in range(config.layers)
        ]
        if config.task == "forecast":
            fan = n * d
            self.head_w = Tensor(uniform_init(rng, (fan, config.horizon), fan),
                                 requires_grad=True, name="head.weight")
            self.head_b = Tensor(uniform_init(rng, (config.horizon,), fan),
                                 requires_grad=True, name="head.bias")
        elif config.task in ("impute", "anomaly"):
            self.head_w = Tensor(uniform_init(rng, (d, p), d), requires_grad=True, name="head.weight")
            self.head_b = Tensor(uniform_init(rng, (p,), d), requires_grad=True, name="head.bias")
        else:
            self.head_w = Tensor(uniform_init(rng, (d, config.num_classes), d),
                                 requires_grad=True, name="head.weight")
            self.head_b = Tensor(uniform_init(rng, (config.num_classes,), d),
                                 requires_grad=True, name="head.bias")

    def parameters(self) -> list[Tensor]:
        out = [self.revin_gamma, self.revin_beta, self.embed_w, self.embed_b, self.pos]
        out.extend(self.router.parameters())
        for block, bank in zip(self.blocks, self.banks):
            out.extend(block.parameters())
            out.extend(bank.parameters())
        out.extend([self.head_w, self.head_b])
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    # ----------------------------------------------------------------- forward

    def forward(
        self,
        batch: SeriesBatch,
        mode: str = EVAL,
        rng: np.random.Generator | None = None,
        noise: list[np.ndarray] | None = None,
    ) -> ForwardTrace:
        cfg = self.config
        if batch.n_channels != cfg.n_channels:
            raise ValueError(
                f"batch has {batch.n_channels} channels, model expects {cfg.n_channels}"
            )
        if batch.length != cfg.lookback:
            raise ValueError(
                f"batch length {batch.length} != configured lookback {cfg.lookback}"
            )
        if noise is not None and len(noise) != cfg.layers:
            raise ValueError("need one noise array per layer")

        observed = batch.missing_mask
        x_norm, stats = revin_normalize_t(
            batch.values, self.revin_gamma, self.revin_beta, cfg.revin_eps, observed
        )
        patches, n, _ = patchify_t(x_norm, cfg.patch_len, cfg.stride)
        tok = embed_t(patches, self.embed_w, self.embed_b, self.pos)
        x = tok.tokens
        n_tokens = cfg.n_channels * n
        state = self.router.init_state(n_tokens)

        layer_tokens, gates_list, terms_list, losses_list, dists, noise_used = [], [], [], [], [], []
        for layer_idx, (block, bank) in enumerate(zip(self.blocks, self.banks)):
            x_e = block.forward(x)
            layer_tokens.append(x_e)
            flat = ad.reshape(x_e, (n_tokens, cfg.d_model))
            o, state = self.router.step(state, flat)
            mu, sigma = self.router.gaussian_heads(o)
            dist = self.router.scores(
                mu, sigma, mode, rng=rng,
                noise=None if noise is None else noise[layer_idx],
            )
            gates = build_gates(dist.scores, cfg.top_k)
            l_cha, terms_c = channel_balance_loss(dist.scores, cfg.n_channels, n, cfg.top_k)
            l_tem, terms_t = temporal_balance_loss(dist.scores, cfg.n_channels, n, cfg.top_k)
            moe_out = moe_layer_forward(flat, gates, bank)
            x = ad.reshape(moe_out, (cfg.n_channels, n, cfg.d_model))

            gates_list.append(gates)
            terms_list.append(merge_terms(terms_c, terms_t, cfg.alpha, cfg.beta))
            losses_list.append((l_tem, l_cha))
            dists.append(dist)
            noise_used.append(dist.epsilon)

        output = self._head(x, stats)
        return ForwardTrace(
            mode=mode,
            stats=stats,
            layer_tokens=layer_tokens,
            gates=gates_list,
            balance=terms_list,
            balance_losses=losses_list,
            distributions=dists,
            final=x,
            output=output,
            observed=observed,
            noise=noise_used,
        )

    def _head(self, v: Tensor, stats: NormStats) -> Tensor:
        cfg = self.config
        n_ch, n, d = v.shape
        if cfg.task == "forecast":
            flat = ad.reshape(v, (n_ch, n * d))
            pred = flat @ self.head_w + self.head_b
            return revin_denormalize_t(pred, stats, self.revin_gamma, self.revin_beta)
        if cfg.task in ("impute", "anomaly"):
            tokens = ad.reshape(v, (n_ch * n, d))
            patches = ad.reshape(tokens @ self.head_w + self.head_b, (n_ch, n, cfg.patch_len))
            idx, _, _ = patch_layout(cfg.lookback, cfg.patch_len, cfg.stride)
            coverage = np.bincount(idx.reshape(-1), minlength=cfg.lookback).astype(np.float64)
            recon = ad.time_scatter(patches, idx, cfg.lookback) * (1.0 / coverage)
            return revin_denormalize_t(recon, stats, self.revin_gamma, self.revin_beta)
        tokens = ad.reshape(v, (n_ch * n, d))
        pooled = ad.reshape(ad.tmean(tokens, axis=0), (1, d))
        return pooled @ self.head_w + self.head_b

    # ------------------------------------------------------------------ losses

    def _task_loss(self, trace: ForwardTrace, target) -> Tensor:
        cfg = self.config
        out = trace.output
        if cfg.task == "classify":
            logits = out
            z = logits - float(np.max(logits.data))
            log_norm = ad.log(ad.tsum(ad.exp(z)))
            picked = ad.gather_pairs(z, np.array([0]), np.array([int(target)]))
            return ad.reshape(log_norm - ad.tsum(picked), ())
        target = np.asarray(target, dtype=np.float64)
        if target.shape != out.shape:
            raise ValueError(f"target shape {target.shape} != output shape {out.shape}")
        diff = out - Tensor(target)
        if cfg.task == "impute":
            if trace.observed is None:
                raise ValueError("imputation loss needs a missing_mask on the input batch")
            hidden = ~trace.observed
            count = float(hidden.sum())
            if count == 0:
                raise ValueError("imputation loss needs at least one masked point")
            diff = diff * Tensor(hidden.astype(np.float64))
            if cfg.task_loss == "l1":
                return ad.tsum(ad.absolute(diff)) * (1.0 / count)
            return ad.tsum(diff * diff) * (1.0 / count)
        if cfg.task_loss == "l1":
            return ad.tmean(ad.absolute(diff))
        return ad.tmean(diff * diff)

    def total_loss(self, trace: ForwardTrace, target) -> tuple[Tensor, dict]:
        cfg = self.config
        task = self._task_loss(trace, target)
        total = task
        tem_sum, cha_sum = 0.0, 0.0
        for l_tem, l_cha in trace.balance_losses:
            total = total + combine(l_tem, l_cha, cfg.alpha, cfg.beta)
            tem_sum += float(l_tem.data)
            cha_sum += float(l_cha.data)
        parts = {
            "task_loss": float(task.data),
            "l_tem": tem_sum,
            "l_cha": cha_sum,
            "total": float(total.data),
        }
        return total, parts


def anomaly_point_scores(output: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Squared reconstruction error per (channel, timestep)."""
    return (output - values) ** 2


def anomaly_timestep_scores(output: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Per-timestep score: worst channel's squared reconstruction error."""
    return anomaly_point_scores(output, values).max(axis=0)


# --------------------------------------------------------------------- CKA


def cka_linear(rep_a: np.ndarray, rep_b: np.ndarray) -> float:
    """Linear centered kernel alignment between two representation matrices.

    Rows are examples, columns features; the value lies in [0, 1] and is
    invariant to orthogonal transforms and isotropic scaling.
    """
    a = np.asarray(rep_a, dtype=np.float64)
    b = np.asarray(rep_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("representations must be 2-D")
    if a.shape[0] != b.shape[0]:
        raise ValueError("representations must have the same number of rows")
    if a.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    cross = np.linalg.norm(ac.T @ bc, "fro") ** 2
    norm_a = np.linalg.norm(ac.T @ ac, "fro")
    norm_b = np.linalg.norm(bc.T @ bc, "fro")
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("degenerate representation")
    return float(cross / (norm_a * norm_b))


def trace_cka(trace: ForwardTrace) -> dict[str, float | str]:
    """CKA between first/last and all adjacent layer representations."""
    reps = [t.data.reshape(-1, t.shape[-1]) for t in trace.layer_tokens]
    n_layers = len(reps)
    pairs: list[tuple[int, int]] = []
    if n_layers == 1:
        pairs = [(0, 0)]
    else:
        pairs = [(0, n_layers - 1)] + [(i, i + 1) for i in range(n_layers - 1)]
    out: dict[str, float | str] = {}
    for i, j in dict.fromkeys(pairs):
        key = f"layer{i + 1}:layer{j + 1}"
        try:
            out[key] = cka_linear(reps[i], reps[j])
        except ValueError as exc:
            out[key] = str(exc)
    return out


def routing_table(trace: ForwardTrace, n_channels: int, n_patches: int):
    """Rows (layer, channel, patch, expert, weight) for every selected gate."""
    rows = []
    for layer_idx, gates in enumerate(trace.gates):
        for token in range(gates.selected.shape[0]):
            channel, patch = divmod(token, n_patches)
            for expert, weight in zip(gates.selected[token], gates.weights[token]):
                rows.append((layer_idx + 1, channel, patch, int(expert), float(weight)))
    return rows
