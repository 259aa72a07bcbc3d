"""Adam optimizer and the seeded training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, no_grad
from .model import TSMoE, ForwardTrace
from .router import TRAIN, EVAL


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training diverged: non-finite loss at step {step}")
        self.step = step


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1**self.t)
            v_hat = self.v[i] / (1.0 - self.beta2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    best_step: int = -1
    best_val: float = float("inf")
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    final_val: float = float("nan")


def validation_task_loss(model: TSMoE, examples) -> float:
    """Mean task loss over examples in inference mode."""
    if not examples:
        return float("nan")
    total = 0.0
    with no_grad():
        for batch, target in examples:
            trace = model.forward(batch, EVAL)
            _, parts = model.total_loss(trace, target)
            total += parts["task_loss"]
    return total / len(examples)


def train_model(
    model: TSMoE,
    train_examples: list,
    val_examples: list | None = None,
    steps: int = 500,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    val_every: int = 50,
) -> TrainResult:
    """Seeded Adam training over (SeriesBatch, target) examples.

    When the example pool fits in one batch, every step sees the full pool,
    which makes the loss trajectory deterministic and smooth. The logged row
    for a step holds the losses before that step's update, so step 0 reports
    the untrained model.
    """
    if not train_examples:
        raise ValueError("no training examples")
    seq = np.random.SeedSequence(seed)
    data_seed, noise_seed = seq.spawn(2)
    rng_data = np.random.default_rng(data_seed)
    rng_noise = np.random.default_rng(noise_seed)

    params = model.parameters()
    optimizer = Adam(params, lr=lr)
    result = TrainResult()
    n_pool = len(train_examples)

    for step in range(steps):
        if n_pool <= batch_size:
            batch = train_examples
        else:
            picks = rng_data.choice(n_pool, size=batch_size, replace=False)
            batch = [train_examples[i] for i in picks]
        optimizer.zero_grad()
        with Tape() as tape:
            total = None
            sums = {"task_loss": 0.0, "l_tem": 0.0, "l_cha": 0.0, "total": 0.0}
            for series, target in batch:
                trace = model.forward(series, TRAIN, rng=rng_noise)
                loss, parts = model.total_loss(trace, target)
                total = loss if total is None else total + loss
                for key in sums:
                    sums[key] += parts[key]
            total = total * (1.0 / len(batch))
            if not np.isfinite(total.data).all():
                raise DivergenceError(step)
            tape.backward(total)
        scale = 1.0 / len(batch)
        result.rows.append({
            "step": step,
            "task_loss": sums["task_loss"] * scale,
            "l_tem": sums["l_tem"] * scale,
            "l_cha": sums["l_cha"] * scale,
            "total": sums["total"] * scale,
        })
        optimizer.step()

        last = step == steps - 1
        if val_examples and (step % val_every == val_every - 1 or last):
            val = validation_task_loss(model, val_examples)
            if val < result.best_val:
                result.best_val = val
                result.best_step = step
                result.best_params = {p.name: p.data.copy() for p in params}
            if last:
                result.final_val = val
    if not result.best_params:
        result.best_params = {p.name: p.data.copy() for p in params}
        result.best_step = steps - 1
    return result
