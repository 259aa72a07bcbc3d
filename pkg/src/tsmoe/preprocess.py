"""Instance normalization, patching, and token embedding.

All three stages are channel independent: no operation here mixes values
across channels. Tokens are flattened channel-major, token c*n + q holding
channel c, patch position q.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class SeriesBatch:
    """A raw multivariate series: N channels by T timesteps.

    ``missing_mask`` is True where a value is observed; masked points keep
    their original value here and are hidden from the model at forward time.
    """

    values: np.ndarray
    channel_names: list[str] = field(default_factory=list)
    missing_mask: np.ndarray | None = None
    frequency: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be 2-D (channels x time)")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError("series must have at least one channel and timestep")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.values.shape[0])]
        if len(self.channel_names) != self.values.shape[0]:
            raise ValueError("channel_names length does not match channel count")
        if self.missing_mask is not None:
            self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
            if self.missing_mask.shape != self.values.shape:
                raise ValueError("missing_mask shape does not match values")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def observed(self) -> np.ndarray:
        if self.missing_mask is None:
            return np.ones_like(self.values, dtype=bool)
        return self.missing_mask


@dataclass
class NormStats:
    """Per-channel standardization statistics plus the affine applied after."""

    mean: np.ndarray
    std: np.ndarray
    eps: float
    affine_gamma: np.ndarray
    affine_beta: np.ndarray


@dataclass
class PatchTensor:
    patches: np.ndarray  # N x n x p
    patch_len: int
    stride: int
    n: int
    pad_len: int


@dataclass
class TokenTensor:
    """Embedded tokens, N x n x d, with the channel-major flattening rule."""

    tokens: Tensor
    n: int

    @property
    def d(self) -> int:
        return self.tokens.shape[-1]

    @property
    def n_channels(self) -> int:
        return self.tokens.shape[0]

    def flat(self) -> Tensor:
        n_ch, n, d = self.tokens.shape
        return ad.reshape(self.tokens, (n_ch * n, d))

    @staticmethod
    def from_flat(flat: Tensor, n_channels: int, n: int) -> "TokenTensor":
        return TokenTensor(ad.reshape(flat, (n_channels, n, flat.shape[-1])), n)


def channel_stats(values: np.ndarray, observed: np.ndarray | None = None, eps: float = 1e-5):
    """Per-channel mean and population std over observed points."""
    if observed is None:
        mean = values.mean(axis=1)
        var = values.var(axis=1)
    else:
        counts = observed.sum(axis=1)
        if np.any(counts < 2):
            raise ValueError("each channel needs at least 2 observed points")
        masked = np.where(observed, values, 0.0)
        mean = masked.sum(axis=1) / counts
        centered = np.where(observed, values - mean[:, None], 0.0)
        var = (centered**2).sum(axis=1) / counts
    return mean, np.sqrt(var)


def revin_normalize_t(
    values: np.ndarray,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    observed: np.ndarray | None = None,
) -> tuple[Tensor, NormStats]:
    """Differentiable instance normalization with learnable per-channel affine.

    Statistics come from observed points only; masked points are zero-filled
    after the affine so the model never sees their values.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if values.shape[1] < 2:
        raise ValueError("need at least 2 timesteps per channel")
    mean, std = channel_stats(values, observed, eps)
    standardized = (values - mean[:, None]) / (std + eps)[:, None]
    g2 = ad.reshape(gamma, (-1, 1))
    b2 = ad.reshape(beta, (-1, 1))
    out = Tensor(standardized) * g2 + b2
    if observed is not None:
        out = out * Tensor(observed.astype(np.float64))
    stats = NormStats(mean, std, eps, gamma.data.copy(), beta.data.copy())
    return out, stats


def revin_denormalize_t(y: Tensor, stats: NormStats, gamma: Tensor, beta: Tensor) -> Tensor:
    """Invert the affine and the standardization: ((y-beta)/gamma)*(std+eps)+mean."""
    if y.shape[0] != stats.mean.shape[0]:
        raise ValueError(
            f"channel count mismatch: {y.shape[0]} outputs vs {stats.mean.shape[0]} stats"
        )
    g2 = ad.reshape(gamma, (-1, 1))
    b2 = ad.reshape(beta, (-1, 1))
    scale = Tensor((stats.std + stats.eps)[:, None])
    mean = Tensor(stats.mean[:, None])
    return (y - b2) / g2 * scale + mean


def revin_normalize(
    batch: SeriesBatch,
    eps: float = 1e-5,
    gamma: np.ndarray | None = None,
    beta: np.ndarray | None = None,
) -> tuple[SeriesBatch, NormStats]:
    """Array-level instance normalization over a SeriesBatch."""
    n = batch.n_channels
    g = Tensor(np.ones(n) if gamma is None else gamma)
    b = Tensor(np.zeros(n) if beta is None else beta)
    observed = batch.missing_mask
    out, stats = revin_normalize_t(batch.values, g, b, eps, observed)
    return (
        SeriesBatch(out.data, list(batch.channel_names), batch.missing_mask, batch.frequency),
        stats,
    )


def revin_denormalize(batch: SeriesBatch, stats: NormStats) -> SeriesBatch:
    if batch.n_channels != stats.mean.shape[0]:
        raise ValueError(
            f"channel count mismatch: {batch.n_channels} vs {stats.mean.shape[0]}"
        )
    out = revin_denormalize_t(
        Tensor(batch.values), stats, Tensor(stats.affine_gamma), Tensor(stats.affine_beta)
    )
    return SeriesBatch(out.data, list(batch.channel_names), batch.missing_mask, batch.frequency)


def patch_layout(length: int, patch_len: int, stride: int):
    """Source-index matrix for patching with end padding by last-value replication.

    Returns (idx, n, pad_len) where idx[q, j] maps patch cell (q, j) to a
    source timestep, clipped to length-1 inside the padded tail.
    """
    if patch_len < 1:
        raise ValueError("patch_len must be >= 1")
    if not 1 <= stride <= patch_len:
        raise ValueError("stride must satisfy 1 <= stride <= patch_len")
    padded = max(length, patch_len)
    rem = (padded - patch_len) % stride
    if rem:
        padded += stride - rem
    n = (padded - patch_len) // stride + 1
    starts = np.arange(n) * stride
    idx = starts[:, None] + np.arange(patch_len)[None, :]
    return np.minimum(idx, length - 1), n, padded - length


def patchify_t(x: Tensor, patch_len: int, stride: int) -> tuple[Tensor, int, int]:
    """Differentiable patch extraction; returns (patches N x n x p, n, pad_len)."""
    idx, n, pad_len = patch_layout(x.shape[1], patch_len, stride)
    return ad.time_gather(x, idx), n, pad_len


def patchify(batch: SeriesBatch, patch_len: int, stride: int) -> PatchTensor:
    patches, n, pad_len = patchify_t(Tensor(batch.values), patch_len, stride)
    return PatchTensor(patches.data, patch_len, stride, n, pad_len)


def embed_t(patches: Tensor, weights: Tensor, bias: Tensor, pos: Tensor) -> TokenTensor:
    """Linear projection of patches to d-dim tokens plus positional offsets.

    The same map applies to every channel and patch position.
    """
    n_ch, n, p = patches.shape
    if weights.shape[0] != p:
        raise ValueError(f"weight rows {weights.shape[0]} != patch length {p}")
    if bias.shape[0] != weights.shape[1]:
        raise ValueError("bias length does not match embedding width")
    if pos.shape != (n, weights.shape[1]):
        raise ValueError(f"positional table must be {n}x{weights.shape[1]}, got {pos.shape}")
    tokens = patches @ weights + bias + pos
    return TokenTensor(tokens, n)


def embed(xp: PatchTensor, weights: np.ndarray, bias: np.ndarray, pos: np.ndarray) -> np.ndarray:
    out = embed_t(Tensor(xp.patches), Tensor(weights), Tensor(bias), Tensor(pos))
    return out.tokens.data
