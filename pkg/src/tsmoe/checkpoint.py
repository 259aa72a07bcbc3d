"""Checkpoint persistence: a text manifest plus a raw float64 blob.

The manifest records the format version, the model configuration, and a
parameter registry (name, shape, byte offset into the blob). Values are
little-endian 64-bit floats, so a save/load roundtrip reproduces inference
bit for bit. Loading refuses a manifest whose configuration differs from
the model it is applied to.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, TSMoE

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def manifest_path(stem) -> Path:
    return Path(str(stem) + ".manifest.json")


def blob_path(stem) -> Path:
    return Path(str(stem) + ".params.bin")


def save_checkpoint(stem, config: ModelConfig, params: list[Tensor]):
    registry = []
    offset = 0
    chunks = []
    for p in params:
        if not p.name:
            raise CheckpointError("every checkpointed parameter needs a name")
        data = np.ascontiguousarray(p.data, dtype="<f8")
        registry.append({"name": p.name, "shape": list(p.data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "params": registry,
    }
    manifest_path(stem).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    blob_path(stem).write_bytes(b"".join(chunks))


def load_checkpoint(stem) -> tuple[dict, dict[str, np.ndarray]]:
    mpath, bpath = manifest_path(stem), blob_path(stem)
    if not mpath.exists() or not bpath.exists():
        raise CheckpointError(f"checkpoint {stem} not found")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')!r}"
        )
    blob = bpath.read_bytes()
    values = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
        values[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return manifest["config"], values


def restore_model(model: TSMoE, stem) -> TSMoE:
    """Load parameter values into a model, refusing on config mismatch."""
    config, values = load_checkpoint(stem)
    expected = model.config.to_dict()
    if config != expected:
        diff = {k: (config.get(k), expected.get(k))
                for k in set(config) | set(expected)
                if config.get(k) != expected.get(k)}
        raise CheckpointError(f"checkpoint config mismatch: {diff}")
    params = {p.name: p for p in model.parameters()}
    if set(params) != set(values):
        raise CheckpointError("checkpoint parameter registry does not match the model")
    for name, arr in values.items():
        if params[name].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for parameter {name}")
        params[name].data = arr.copy()
    return model


def model_from_checkpoint(stem) -> TSMoE:
    config, _ = load_checkpoint(stem)
    model = TSMoE(ModelConfig(**config))
    return restore_model(model, stem)
