"""Patch-tokenized time series transformer with a recurrent noisy-gated
mixture-of-experts layer, load-balancing losses, and four task heads."""

from .autodiff import Tape, Tensor, no_grad
from .model import ModelConfig, TSMoE, cka_linear
from .preprocess import SeriesBatch

__all__ = [
    "ModelConfig",
    "SeriesBatch",
    "TSMoE",
    "Tape",
    "Tensor",
    "cka_linear",
    "no_grad",
]

__version__ = "0.1.0"
