"""Task pipelines: dataset assembly per task, and test-split evaluation.

Evaluation windows for the validation/test regions include lookback context
from earlier data so the first target lands exactly on the region boundary,
and the final admissible window is never dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .config import RunConfig
from .data import (
    ClassificationData,
    WindowSpec,
    apply_mask,
    classification_examples,
    contiguous_split,
    enumerate_windows,
    forecast_examples,
    generate,
    imputation_examples,
    load_csv,
    reconstruction_examples,
)
from .metrics import ForecastEval, MetricsReport, accuracy, auc_roc, mae, mase, mse, msmape, point_f1
from .model import TSMoE, anomaly_timestep_scores
from .preprocess import SeriesBatch
from .router import EVAL


@dataclass
class TaskData:
    """Everything a run needs: training pool, validation pool, eval payload."""

    n_channels: int
    train_examples: list
    val_examples: list
    series: SeriesBatch | None = None
    labels: np.ndarray | None = None
    classification: ClassificationData | None = None


def region_windows(region: tuple[int, int], lookback: int, horizon: int,
                   stride: int, with_context: bool) -> list[tuple[int, int]]:
    """Absolute (start, end) windows for a region, optionally reaching back
    so the first target starts at the region boundary."""
    lo, hi = region
    base = max(0, lo - lookback) if with_context else lo
    spec = WindowSpec(lookback, horizon, stride)
    return [(base + s, base + e) for s, e in enumerate_windows(hi - base, spec)]


def covering_windows(region: tuple[int, int], lookback: int) -> list[tuple[int, int]]:
    """Non-overlapping lookback-sized windows covering a region end to end.

    A final window aligned to the region end is appended when the length is
    not a multiple of the lookback, so no tail point goes unscored. A region
    shorter than the lookback is covered by one window reaching back before
    it (callers restrict their metrics to the region).
    """
    lo, hi = region
    if hi - lo < lookback:
        return [(hi - lookback, hi)] if hi >= lookback else []
    windows = [(lo + s, lo + e) for s, e in
               enumerate_windows(hi - lo, WindowSpec(lookback, 0, lookback))]
    if windows and windows[-1][1] < hi:
        windows.append((hi - lookback, hi))
    return windows


def _load_series(run: RunConfig):
    if run.data_source == "csv":
        return load_csv(run.csv_path, run.timestamp_column or None), None
    out = generate(run.synthetic_spec())
    if isinstance(out, tuple):
        return out  # (series, labels)
    return out, None


def build_task_data(run: RunConfig) -> TaskData:
    if run.task == "classify":
        if run.data_source == "csv":
            raise ValueError("classification runs use the synthetic generator")
        spec = run.synthetic_spec()
        spec.kind = "class-frequencies"
        spec.length = run.lookback
        data = generate(spec)
        train = classification_examples(data.train, data.train_labels)
        test = classification_examples(data.test, data.test_labels)
        return TaskData(
            n_channels=run.channels,
            train_examples=train,
            val_examples=test,
            classification=data,
        )

    series, labels = _load_series(run)
    split = contiguous_split(series.length, run.split_ratios())
    train_region, val_region, _ = split
    lookback, stride = run.lookback, run.window_stride

    if run.task == "forecast":
        train_w = region_windows(train_region, lookback, run.horizon, stride, False)
        val_w = region_windows(val_region, lookback, run.horizon, stride, True)
        train = forecast_examples(series, train_w, lookback)
        val = forecast_examples(series, val_w, lookback)
    elif run.task == "impute":
        train_w = region_windows(train_region, lookback, 0, stride, False)
        val_w = region_windows(val_region, lookback, 0, lookback, True)
        train = imputation_examples(series, train_w, run.mask_ratio, run.seed)
        val = imputation_examples(series, val_w, run.mask_ratio, run.seed + 10_000)
    else:  # anomaly
        train_w = region_windows(train_region, lookback, 0, stride, False)
        val_w = covering_windows(val_region, lookback)
        train = reconstruction_examples(series, train_w)
        val = reconstruction_examples(series, val_w)
    return TaskData(
        n_channels=series.n_channels,
        train_examples=train,
        val_examples=val,
        series=series,
        labels=labels,
    )


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalResult:
    report: MetricsReport
    figure_payload: dict = field(default_factory=dict)


def _two_level(per_channel_values: dict[str, list[float]]):
    """Mean over windows per series, then mean over series."""
    per_series = {name: float(np.mean(vals)) for name, vals in per_channel_values.items() if vals}
    agg = float(np.mean(list(per_series.values()))) if per_series else float("nan")
    return per_series, agg


def _pick_region(series_length: int, run: RunConfig, split: str) -> tuple[int, int]:
    _, val_region, test_region = contiguous_split(series_length, run.split_ratios())
    if split == "val":
        return val_region
    if split == "test":
        return test_region
    raise ValueError(f"unknown split {split!r}")


def evaluate_forecast(model: TSMoE, series: SeriesBatch, run: RunConfig,
                      split: str = "test") -> EvalResult:
    region = _pick_region(series.length, run, split)
    windows = region_windows(region, run.lookback, run.horizon, run.window_stride, True)
    if not windows:
        raise ValueError(f"{split} split too short for one forecast window")
    names = series.channel_names
    values: dict[str, dict[str, list[float]]] = {
        m: {name: [] for name in names} for m in ("mse", "mae", "mase", "msmape")
    }
    skipped_mase = 0
    payload = {}
    with no_grad():
        for w_idx, (start, end) in enumerate(windows):
            inp = SeriesBatch(series.values[:, start:start + run.lookback], list(names))
            target = series.values[:, start + run.lookback:end]
            pred = model.forward(inp, EVAL).output.data
            for c, name in enumerate(names):
                values["mse"][name].append(mse(pred[c], target[c]))
                values["mae"][name].append(mae(pred[c], target[c]))
                values["msmape"][name].append(
                    msmape(pred[c], target[c], run.msmape_epsilon)
                )
                try:
                    values["mase"][name].append(mase(ForecastEval(
                        inp.values[c], target[c], pred[c],
                        seasonality=run.mase_seasonality,
                        epsilon=run.msmape_epsilon,
                    )))
                except ValueError:
                    skipped_mase += 1
            if w_idx == 0:
                payload = {
                    "input": inp.values, "target": target, "prediction": pred,
                    "channel_names": list(names),
                }
    report = MetricsReport(task="forecast", skipped={"mase": skipped_mase},
                           info={"windows": len(windows)})
    per_series: dict[str, dict[str, float]] = {name: {} for name in names}
    for metric, by_channel in values.items():
        series_means, agg = _two_level(by_channel)
        for name, val in series_means.items():
            per_series[name][metric] = val
        if series_means:
            report.aggregate[metric] = agg
    report.per_series = per_series
    return EvalResult(report, payload)


def evaluate_impute(model: TSMoE, series: SeriesBatch, run: RunConfig,
                    split: str = "test", mask_seed_offset: int = 20_000) -> EvalResult:
    region = _pick_region(series.length, run, split)
    windows = covering_windows(region, run.lookback)
    if not windows:
        raise ValueError(f"{split} split too short for one imputation window")
    names = series.channel_names
    sq = {name: [] for name in names}
    ab = {name: [] for name in names}
    payload = {}
    region_lo = region[0]
    with no_grad():
        for w_idx, (start, end) in enumerate(windows):
            window = SeriesBatch(series.values[:, start:end], list(names))
            masked = apply_mask(window, run.mask_ratio, run.seed + mask_seed_offset + w_idx)
            recon = model.forward(masked, EVAL).output.data
            hidden = ~masked.observed()
            if start < region_lo:  # context window: score region points only
                hidden[:, : region_lo - start] = False
            for c, name in enumerate(names):
                if not hidden[c].any():
                    continue
                sq[name].append(mse(recon[c][hidden[c]], window.values[c][hidden[c]]))
                ab[name].append(mae(recon[c][hidden[c]], window.values[c][hidden[c]]))
            if w_idx == 0:
                payload = {
                    "values": window.values, "observed": masked.observed(),
                    "reconstruction": recon, "channel_names": list(names),
                }
    report = MetricsReport(task="impute", info={
        "windows": len(windows), "mask_ratio": run.mask_ratio,
    })
    per_series: dict[str, dict[str, float]] = {}
    mse_means, mse_agg = _two_level(sq)
    mae_means, mae_agg = _two_level(ab)
    for name in names:
        if name in mse_means:
            per_series[name] = {"mse": mse_means[name], "mae": mae_means[name]}
    report.aggregate = {"mse": mse_agg, "mae": mae_agg}
    report.per_series = per_series
    return EvalResult(report, payload)


def region_scores(model: TSMoE, series: SeriesBatch, region: tuple[int, int],
                  lookback: int) -> np.ndarray:
    """Per-timestep anomaly scores over a region, averaging window overlaps.

    Windows may reach back before the region for context; only in-region
    points receive scores.
    """
    lo, hi = region
    total = np.zeros(hi - lo)
    count = np.zeros(hi - lo)
    with no_grad():
        for start, end in covering_windows(region, lookback):
            window = SeriesBatch(series.values[:, start:end], list(series.channel_names))
            recon = model.forward(window, EVAL).output.data
            scores = anomaly_timestep_scores(recon, window.values)
            clip = max(lo - start, 0)
            total[start + clip - lo:end - lo] += scores[clip:]
            count[start + clip - lo:end - lo] += 1.0
    if not count.all():
        raise ValueError("anomaly scoring left uncovered points; region too short")
    return total / count


def evaluate_anomaly(model: TSMoE, series: SeriesBatch, labels: np.ndarray,
                     run: RunConfig, split: str = "test") -> EvalResult:
    _, val_region, _ = contiguous_split(series.length, run.split_ratios())
    region = _pick_region(series.length, run, split)
    val_scores = region_scores(model, series, val_region, run.lookback)
    threshold = float(np.percentile(val_scores, 100.0 * (1.0 - run.anomaly_ratio)))
    test_scores = region_scores(model, series, region, run.lookback)
    test_labels = labels[region[0]:region[1]]
    report = MetricsReport(task="anomaly", info={
        "threshold": threshold, "anomaly_ratio": run.anomaly_ratio,
        "test_points": int(test_scores.size),
    })
    flagged = test_scores > threshold
    report.aggregate["point_f1"] = point_f1(flagged, test_labels.astype(bool))
    try:
        report.aggregate["auc_roc"] = auc_roc(test_scores, test_labels)
    except ValueError:
        report.skipped["auc_roc"] = 1
    payload = {
        "scores": test_scores, "labels": test_labels, "threshold": threshold,
    }
    return EvalResult(report, payload)


def evaluate_classify(model: TSMoE, data: ClassificationData) -> EvalResult:
    preds = []
    with no_grad():
        for inst in data.test:
            logits = model.forward(inst, EVAL).output.data
            preds.append(int(np.argmax(logits)))
    preds = np.asarray(preds)
    report = MetricsReport(task="classify", info={"instances": len(data.test)})
    report.aggregate["accuracy"] = accuracy(preds, data.test_labels)
    confusion = np.zeros((data.num_classes, data.num_classes), dtype=np.int64)
    for p, t in zip(preds, data.test_labels):
        confusion[t, p] += 1
    return EvalResult(report, {"confusion": confusion})


def evaluate(model: TSMoE, task_data: TaskData, run: RunConfig, split: str = "test") -> EvalResult:
    if run.task == "forecast":
        return evaluate_forecast(model, task_data.series, run, split)
    if run.task == "impute":
        return evaluate_impute(model, task_data.series, run, split)
    if run.task == "anomaly":
        if task_data.labels is None:
            raise ValueError("anomaly evaluation needs point labels")
        return evaluate_anomaly(model, task_data.series, task_data.labels, run, split)
    return evaluate_classify(model, task_data.classification)
