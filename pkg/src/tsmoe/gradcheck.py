"""Central-difference verification of tape gradients.

The checker is deliberately independent of the backward rules it audits:
it only re-evaluates the forward function at perturbed parameter values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, no_grad


class GradCheckError(RuntimeError):
    pass


@dataclass
class ParamCheck:
    """Worst-case comparison for one parameter group."""

    name: str
    size: int
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float

    def passed(self, rel_tol: float) -> bool:
        return self.max_rel_err <= rel_tol


def grad_check(
    f,
    params: list[Tensor],
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-6,
    h: float = 1e-5,
) -> list[ParamCheck]:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor; any randomness inside must be frozen so repeated calls agree.
    Every entry of every parameter is probed at +/- h.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        if loss.data.size != 1:
            raise GradCheckError("objective must be scalar")
        if not np.isfinite(loss.data).all():
            raise GradCheckError("objective is non-finite at the base point")
        tape.backward(loss)
    analytic = {
        id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for p in params
    }

    reports = []
    for p in params:
        name = p.name or f"param@{id(p):x}"
        flat = p.data.reshape(-1)
        grads = analytic[id(p)].reshape(-1)
        worst = ParamCheck(name, flat.size, 0.0, -1, math.nan, math.nan)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            with no_grad():
                up = float(f().data)
            flat[i] = saved - h
            with no_grad():
                down = float(f().data)
            flat[i] = saved
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradCheckError(
                    f"non-finite objective while probing parameter {name!r} entry {i}"
                )
            numeric = (up - down) / (2.0 * h)
            a = grads[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            if rel >= worst.max_rel_err:
                worst = ParamCheck(name, flat.size, rel, i, a, numeric)
        reports.append(worst)
    return reports


def all_pass(reports: list[ParamCheck], rel_tol: float) -> bool:
    return all(r.passed(rel_tol) for r in reports)
