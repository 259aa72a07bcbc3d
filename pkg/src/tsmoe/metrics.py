"""Evaluation metrics and report assembly.

Forecast metrics aggregate in two levels: windows within a series, then
series within a dataset. Windows with an undefined metric (constant seasonal
history for the scaled error) are counted as skipped rather than poisoning
the means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ForecastEval:
    """One window's forecast with the history needed for scaled errors."""

    train_history: np.ndarray
    actuals: np.ndarray
    forecasts: np.ndarray
    seasonality: int = 1
    epsilon: float = 0.1

    def __post_init__(self):
        self.train_history = np.asarray(self.train_history, dtype=np.float64)
        self.actuals = np.asarray(self.actuals, dtype=np.float64)
        self.forecasts = np.asarray(self.forecasts, dtype=np.float64)
        if self.actuals.shape != self.forecasts.shape:
            raise ValueError("actuals and forecasts must have equal length")
        if self.seasonality < 1:
            raise ValueError("seasonality must be >= 1")
        if self.train_history.size <= self.seasonality:
            raise ValueError("history must be longer than the seasonality")


def _check_lengths(f, y):
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if f.shape != y.shape:
        raise ValueError(f"length mismatch: {f.shape} vs {y.shape}")
    if f.size == 0:
        raise ValueError("need at least one point")
    return f, y


def mse(f, y) -> float:
    f, y = _check_lengths(f, y)
    return float(np.mean((f - y) ** 2))


def mae(f, y) -> float:
    f, y = _check_lengths(f, y)
    return float(np.mean(np.abs(f - y)))


def mase(ev: ForecastEval) -> float:
    """Forecast error scaled by the in-sample seasonal-naive error."""
    y_hist = ev.train_history
    s = ev.seasonality
    seasonal_err = np.abs(y_hist[s:] - y_hist[:-s]).sum()
    if seasonal_err == 0.0:
        raise ValueError("undefined MASE: constant seasonal history")
    h = ev.actuals.size
    m = y_hist.size
    numerator = np.abs(ev.forecasts - ev.actuals).sum()
    return float(numerator / (h / (m - s) * seasonal_err))


def msmape(f, y, epsilon: float = 0.1) -> float:
    """Symmetric percentage error with an epsilon-floored denominator."""
    f, y = _check_lengths(f, y)
    if epsilon < 0:
        raise ValueError("epsilon cannot be negative")
    denom = np.maximum(np.abs(y) + np.abs(f) + epsilon, 0.5 + epsilon) / 2.0
    return float(100.0 * np.mean(np.abs(f - y) / denom))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    sorted_x = x[order]
    boundaries = np.nonzero(np.diff(sorted_x))[0] + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [x.size]))
    avg = (starts + ends + 1) / 2.0  # 1-based average rank per tie group
    ranks = np.empty(x.size, dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc_roc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUC: labels contain a single class")
    ranks = _average_ranks(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("length mismatch")
    if pred.size == 0:
        raise ValueError("need at least one label")
    return float(np.mean(pred == truth))


def point_f1(pred, truth) -> float:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError("length mismatch")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# -------------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    """Named metric values with per-series detail; serializes deterministically."""

    task: str
    aggregate: dict = field(default_factory=dict)
    per_series: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def validate(self):
        def walk(obj, where):
            if isinstance(obj, dict):
                for key, val in obj.items():
                    walk(val, f"{where}.{key}")
            elif isinstance(obj, float) and not math.isfinite(obj):
                raise ValueError(f"non-finite report value at {where}")

        walk(self.aggregate, "aggregate")
        walk(self.per_series, "per_series")

    def to_json(self) -> str:
        self.validate()
        doc = {
            "task": self.task,
            "aggregate": self.aggregate,
            "per_series": self.per_series,
            "skipped": self.skipped,
            "info": self.info,
        }
        return stable_json(doc)


def stable_json(obj) -> str:
    """JSON with sorted keys and floats at 17 significant digits."""
    pieces = []
    _render_json(obj, pieces)
    return "".join(pieces)


def _render_json(obj, out: list):
    if isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if i:
                out.append(", ")
            if not isinstance(key, str):
                raise TypeError("JSON object keys must be strings")
            out.append(_json_string(key))
            out.append(": ")
            _render_json(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(", ")
            _render_json(item, out)
        out.append("]")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        value = float(obj)
        if not math.isfinite(value):
            raise ValueError("cannot serialize non-finite float")
        out.append(format(value, ".17g"))
    elif isinstance(obj, str):
        out.append(_json_string(obj))
    elif obj is None:
        out.append("null")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def _json_string(s: str) -> str:
    escaped = s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
    return f'"{escaped}"'
