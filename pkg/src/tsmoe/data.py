"""Synthetic series generators, CSV ingestion, windowing, splits, masking.

Window enumeration never drops the final admissible window. All generators
are bit-reproducible given their seed.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .preprocess import SeriesBatch


class CsvParseError(ValueError):
    pass


@dataclass
class WindowSpec:
    lookback: int
    horizon: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.lookback < 1:
            raise ValueError("lookback must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon cannot be negative")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass
class SyntheticSpec:
    kind: str  # sinusoid-mixture | ar1 | anomaly-injected | class-frequencies
    n_channels: int = 1
    length: int = 96
    seed: int = 0
    frequencies: tuple[float, ...] = (4.0,)  # cycles over the full length
    amplitudes: tuple[float, ...] = (1.0,)
    phases: tuple[float, ...] | None = None  # fixed per component; default seeded
    noise_std: float = 0.0
    ar_coeff: float = 0.9
    spike_rate: float = 0.02
    spike_magnitude: float = 8.0
    num_classes: int = 2
    train_instances: int = 0
    test_instances: int = 0
    class_periods: tuple[float, ...] | None = None


@dataclass
class ClassificationData:
    train: list[SeriesBatch]
    train_labels: np.ndarray
    test: list[SeriesBatch]
    test_labels: np.ndarray
    num_classes: int


def enumerate_windows(length: int, spec: WindowSpec) -> list[tuple[int, int]]:
    """Every admissible (start, end) pair, end exclusive, stepping by stride.

    The last admissible window is always included; a too-short series yields
    an empty list with a warning.
    """
    span = spec.lookback + spec.horizon
    if length < span:
        warnings.warn(
            f"series of length {length} is shorter than window span {span}; no windows",
            stacklevel=2,
        )
        return []
    starts = range(0, length - span + 1, spec.stride)
    return [(s, s + span) for s in starts]


def contiguous_split(length: int, ratios: tuple[float, float, float] = (7, 1, 2)):
    """Chronological (train, val, test) index ranges from proportional ratios."""
    total = sum(ratios)
    if total <= 0 or any(r < 0 for r in ratios):
        raise ValueError("split ratios must be nonnegative with a positive sum")
    a = int(length * ratios[0] / total)
    b = a + int(length * ratios[1] / total)
    return (0, a), (a, b), (b, length)


def _sinusoid(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    freqs = np.asarray(spec.frequencies, dtype=np.float64)
    amps = np.asarray(spec.amplitudes, dtype=np.float64)
    if freqs.shape != amps.shape:
        raise ValueError("frequencies and amplitudes must have equal length")
    t = np.arange(spec.length)
    values = np.zeros((spec.n_channels, spec.length))
    for c in range(spec.n_channels):
        if spec.phases is not None:
            phases = np.asarray(spec.phases, dtype=np.float64)
            if phases.shape != freqs.shape:
                raise ValueError("phases must match frequencies in length")
        else:
            phases = rng.uniform(0.0, 2.0 * np.pi, size=freqs.shape)
        for f, a, ph in zip(freqs, amps, phases):
            values[c] += a * np.sin(2.0 * np.pi * f * t / spec.length + ph)
    if spec.noise_std > 0:
        values += spec.noise_std * rng.standard_normal(values.shape)
    return values


def _ar1(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    if abs(spec.ar_coeff) >= 1.0:
        raise ValueError(f"ar1 coefficient must satisfy |phi| < 1, got {spec.ar_coeff}")
    scale = spec.noise_std if spec.noise_std > 0 else 1.0
    innovations = scale * rng.standard_normal((spec.n_channels, spec.length))
    values = np.empty_like(innovations)
    values[:, 0] = innovations[:, 0]
    for t in range(1, spec.length):
        values[:, t] = spec.ar_coeff * values[:, t - 1] + innovations[:, t]
    return values


def generate(spec: SyntheticSpec):
    """Build a seeded synthetic dataset; the return type depends on the kind.

    sinusoid-mixture / ar1 -> SeriesBatch
    anomaly-injected       -> (SeriesBatch, per-timestep labels)
    class-frequencies      -> ClassificationData
    """
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "sinusoid-mixture":
        return SeriesBatch(_sinusoid(spec, rng))
    if spec.kind == "ar1":
        return SeriesBatch(_ar1(spec, rng))
    if spec.kind == "anomaly-injected":
        values = _ar1(spec, rng)
        labels = (rng.random(spec.length) < spec.spike_rate).astype(np.int64)
        hit = np.nonzero(labels)[0]
        channels = rng.integers(0, spec.n_channels, size=hit.size)
        signs = rng.choice([-1.0, 1.0], size=hit.size)
        values[channels, hit] += signs * spec.spike_magnitude
        return SeriesBatch(values), labels
    if spec.kind == "class-frequencies":
        return _class_frequencies(spec, rng)
    raise ValueError(f"unknown synthetic kind {spec.kind!r}")


def _class_frequencies(spec: SyntheticSpec, rng: np.random.Generator) -> ClassificationData:
    if spec.num_classes < 2:
        raise ValueError("need at least 2 classes")
    if spec.class_periods is not None:
        periods = np.asarray(spec.class_periods, dtype=np.float64)
        if periods.size != spec.num_classes:
            raise ValueError("class_periods must list one period per class")
    else:
        periods = spec.length / (2.0 * (1.0 + np.arange(spec.num_classes)))

    def make(count: int) -> tuple[list[SeriesBatch], np.ndarray]:
        labels = rng.permutation(np.arange(count) % spec.num_classes)
        t = np.arange(spec.length)
        out = []
        for lab in labels:
            phase = rng.uniform(0.0, 2.0 * np.pi)
            values = np.sin(2.0 * np.pi * t / periods[lab] + phase)
            values = np.tile(values, (spec.n_channels, 1))
            if spec.noise_std > 0:
                values = values + spec.noise_std * rng.standard_normal(values.shape)
            out.append(SeriesBatch(values))
        return out, labels

    train, train_labels = make(spec.train_instances)
    test, test_labels = make(spec.test_instances)
    return ClassificationData(train, train_labels, test, test_labels, spec.num_classes)


def apply_mask(batch: SeriesBatch, ratio: float, seed: int) -> SeriesBatch:
    """Hide a uniformly random fraction of points; values stay as targets.

    The returned batch carries missing_mask (True = observed); the model
    zero-fills hidden points after normalization.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("mask ratio must be in (0, 1)")
    rng = np.random.default_rng(seed)
    n_points = batch.values.size
    count = int(round(ratio * n_points))
    flat = rng.choice(n_points, size=count, replace=False)
    mask = np.ones(n_points, dtype=bool)
    mask[flat] = False
    base = batch.observed().reshape(-1)
    return SeriesBatch(
        batch.values.copy(),
        list(batch.channel_names),
        (mask & base).reshape(batch.values.shape),
        batch.frequency,
    )


_TIMESTAMP_NAMES = {"date", "time", "timestamp", "datetime"}
_NAN_CELLS = {"", "nan"}


def load_csv(path, timestamp_column: str | None = "auto") -> SeriesBatch:
    """Read a header + rows-in-time-order CSV into a SeriesBatch.

    One optional timestamp column is skipped; NaN-convention cells become
    masked points; anything else non-numeric is a parse error naming the line.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        skip = _timestamp_index(header, timestamp_column, path)
        names = [h for i, h in enumerate(header) if i != skip]
        if not names:
            raise CsvParseError(f"{path}: no value columns")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CsvParseError(
                    f"{path}: line {line_no}: expected {len(header)} fields, got {len(row)}"
                )
            parsed = []
            for i, cell in enumerate(row):
                if i == skip:
                    continue
                text = cell.strip()
                if text.lower() in _NAN_CELLS:
                    parsed.append(np.nan)
                    continue
                try:
                    parsed.append(float(text))
                except ValueError:
                    raise CsvParseError(
                        f"{path}: line {line_no}: non-numeric cell {cell!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise CsvParseError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64).T  # channels x time
    observed = ~np.isnan(values)
    masked = not observed.all()
    if masked:
        values = np.where(observed, values, 0.0)
    return SeriesBatch(values, names, observed if masked else None)


def _timestamp_index(header: list[str], timestamp_column, path) -> int | None:
    if timestamp_column is None:
        return None
    if timestamp_column == "auto":
        if header and header[0].lower() in _TIMESTAMP_NAMES:
            return 0
        return None
    if timestamp_column not in header:
        raise CsvParseError(f"{path}: timestamp column {timestamp_column!r} not in header")
    return header.index(timestamp_column)


def save_csv(batch: SeriesBatch, path):
    """Write channels as columns at 17 significant digits (bit-exact roundtrip)."""
    observed = batch.observed()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(batch.channel_names)
        for t in range(batch.length):
            writer.writerow(
                [
                    format(batch.values[c, t], ".17g") if observed[c, t] else "NaN"
                    for c in range(batch.n_channels)
                ]
            )


# --------------------------------------------------------------- task examples


def forecast_examples(batch: SeriesBatch, windows, lookback: int) -> list:
    """(lookback SeriesBatch, horizon target) pairs from (start, end) windows."""
    out = []
    for start, end in windows:
        inp = SeriesBatch(batch.values[:, start : start + lookback], list(batch.channel_names))
        target = batch.values[:, start + lookback : end]
        out.append((inp, target))
    return out


def reconstruction_examples(batch: SeriesBatch, windows) -> list:
    """(window SeriesBatch, window values) pairs for reconstruction training."""
    out = []
    for start, end in windows:
        window = SeriesBatch(batch.values[:, start:end], list(batch.channel_names))
        out.append((window, window.values))
    return out


def imputation_examples(batch: SeriesBatch, windows, ratio: float, seed: int) -> list:
    """Masked windows paired with their original values as targets."""
    out = []
    for i, (start, end) in enumerate(windows):
        window = SeriesBatch(batch.values[:, start:end], list(batch.channel_names))
        masked = apply_mask(window, ratio, seed + i)
        out.append((masked, window.values))
    return out


def classification_examples(instances: list[SeriesBatch], labels: np.ndarray) -> list:
    return [(inst, int(lab)) for inst, lab in zip(instances, labels)]
