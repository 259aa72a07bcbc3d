"""Flat run configuration: documented keys, key=value files, flag overrides.

Every key has a default; unknown keys are rejected. The model defaults are
the tuned common setting (patch 24, 3 layers, 10 routed experts, top-3,
1 shared expert). Resolution order: defaults < config file < CLI flags;
the output directory may also come from the TSMOE_OUT_DIR variable, which
beats the file but not an explicit flag.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .data import SyntheticSpec, WindowSpec
from .model import ModelConfig

OUT_DIR_ENV = "TSMOE_OUT_DIR"


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(part) for part in text.split(","))


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    # task and data source
    task: str = "forecast"
    data_source: str = "synthetic"  # synthetic | csv
    csv_path: str = ""
    timestamp_column: str = "auto"
    # synthetic generator
    synthetic_kind: str = "sinusoid-mixture"
    channels: int = 2
    length: int = 480
    frequencies: tuple[float, ...] = (20.0,)
    amplitudes: tuple[float, ...] = (1.0,)
    noise_std: float = 0.0
    ar_coeff: float = 0.9
    spike_rate: float = 0.02
    spike_magnitude: float = 8.0
    num_classes: int = 2
    class_periods: tuple[float, ...] = ()
    train_instances: int = 200
    test_instances: int = 100
    # windowing and splits
    lookback: int = 96
    horizon: int = 48
    window_stride: int = 1
    split: str = "7:1:2"
    mask_ratio: float = 0.25
    anomaly_ratio: float = 0.05
    # model (tuned common-setting defaults)
    patch_len: int = 24
    patch_stride: int = 0
    d_model: int = 32
    heads: int = 4
    layers: int = 3
    n_routed: int = 10
    n_shared: int = 1
    top_k: int = 3
    d_ff: int = 0
    alpha: float = 0.01
    beta: float = 0.01
    task_loss: str = "l2"
    # optimizer
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 8
    val_every: int = 50
    # evaluation metrics
    mase_seasonality: int = 1
    msmape_epsilon: float = 0.1
    # bookkeeping
    seed: int = 0
    out_dir: str = "tsmoe_out"
    figures: bool = True

    def validate(self):
        if self.task not in ("forecast", "impute", "anomaly", "classify"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.data_source not in ("synthetic", "csv"):
            raise ConfigError(f"unknown data_source {self.data_source!r}")
        if self.data_source == "csv" and not self.csv_path:
            raise ConfigError("csv_path is required when data_source=csv")
        parts = self.split.split(":")
        if len(parts) != 3:
            raise ConfigError(f"split must look like 7:1:2, got {self.split!r}")
        try:
            [float(p) for p in parts]
        except ValueError:
            raise ConfigError(f"split must be numeric, got {self.split!r}") from None
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in (0, 1)")
        if not 0.0 < self.anomaly_ratio < 1.0:
            raise ConfigError("anomaly_ratio must be in (0, 1)")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.model_config(n_channels=max(1, self.channels)).validate()

    # ------------------------------------------------------------- derived

    def split_ratios(self) -> tuple[float, float, float]:
        a, b, c = (float(p) for p in self.split.split(":"))
        return a, b, c

    def window_spec(self) -> WindowSpec:
        horizon = self.horizon if self.task == "forecast" else 0
        return WindowSpec(self.lookback, horizon, self.window_stride)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            kind=self.synthetic_kind,
            n_channels=self.channels,
            length=self.length,
            seed=self.seed,
            frequencies=self.frequencies,
            amplitudes=self.amplitudes,
            noise_std=self.noise_std,
            ar_coeff=self.ar_coeff,
            spike_rate=self.spike_rate,
            spike_magnitude=self.spike_magnitude,
            num_classes=self.num_classes,
            train_instances=self.train_instances,
            test_instances=self.test_instances,
            class_periods=self.class_periods or None,
        )

    def model_config(self, n_channels: int) -> ModelConfig:
        return ModelConfig(
            task=self.task,
            n_channels=n_channels,
            lookback=self.lookback,
            horizon=self.horizon,
            num_classes=self.num_classes,
            patch_len=self.patch_len,
            patch_stride=self.patch_stride,
            d_model=self.d_model,
            heads=self.heads,
            layers=self.layers,
            n_routed=self.n_routed,
            n_shared=self.n_shared,
            top_k=self.top_k,
            d_ff=self.d_ff,
            alpha=self.alpha,
            beta=self.beta,
            task_loss=self.task_loss,
            seed=self.seed,
        )

    def resolved_out_dir(self, flag_value: str | None = None) -> str:
        if flag_value:
            return flag_value
        env = os.environ.get(OUT_DIR_ENV)
        return env if env else self.out_dir

    def to_file_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(format(v, "g") for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


_CONVERTERS = {
    int: int,
    float: float,
    str: str,
    bool: _bool,
    tuple[float, ...]: _floats,
}


def _field_converters():
    out = {}
    for f in fields(RunConfig):
        conv = _CONVERTERS.get(f.type)
        if conv is None:
            for typ, fn in _CONVERTERS.items():
                if f.type == typ or f.type == getattr(typ, "__name__", None):
                    conv = fn
                    break
        if conv is None:
            # dataclass field annotations arrive as strings under future import
            name = str(f.type)
            conv = {
                "int": int, "float": float, "str": str, "bool": _bool,
                "tuple[float, ...]": _floats,
            }.get(name)
        if conv is None:
            raise TypeError(f"no converter for config field {f.name}: {f.type}")
        out[f.name] = conv
    return out


def parse_config_file(path) -> dict[str, str]:
    """key=value lines; blank lines and # comments allowed."""
    raw = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ConfigError(f"{path}: line {line_no}: expected key=value")
            key, _, value = text.partition("=")
            raw[key.strip()] = value.strip()
    return raw


def resolve_config(
    file_values: dict[str, str] | None = None,
    overrides: dict[str, str] | None = None,
) -> RunConfig:
    """Materialize a RunConfig from defaults, file values, and flag overrides."""
    converters = _field_converters()
    config = RunConfig()
    provided = set()
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in converters:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                setattr(config, key, converters[key](value))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None
            provided.add(key)
    # imputation runs on longer inputs by default; still one flat key
    if config.task == "impute" and "lookback" not in provided:
        config.lookback = 256
        if "length" not in provided:
            config.length = 1280
    config.validate()
    return config
