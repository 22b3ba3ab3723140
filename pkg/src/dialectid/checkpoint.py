"""Checkpoint container: a JSON manifest next to one raw little-endian float32 blob.

::

    run/checkpoint/
        manifest.json   format version, model config, tensor table, metadata
        weights.bin     tensors back to back, in manifest order
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .encoder import Model, ModelConfig, param_shapes
from .numerics import Tensor

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path, metadata: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, offset = [], 0
    with open(path / BLOB, "wb") as fh:
        for name, t in model.params.items():
            raw = np.ascontiguousarray(t.data, dtype=_LE_F32).tobytes()
            table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "config": model.config.to_dict(),
        "tensors": table,
        "metadata": metadata or {},
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}")
    return manifest


def load_checkpoint(path, expected_config: ModelConfig | None = None, dtype=np.float32):
    """Load a model; returns ``(model, metadata)``.

    Raises :class:`CheckpointError` on a version mismatch, a tensor whose
    manifest shape disagrees with the config, a truncated blob, or a config
    different from ``expected_config``.
    """
    path = Path(path)
    manifest = read_manifest(path)
    config = ModelConfig(**manifest["config"])
    if expected_config is not None and expected_config != config:
        diff = sorted(k for k, v in config.to_dict().items() if expected_config.to_dict().get(k) != v)
        raise CheckpointError(f"{path}: checkpoint config differs from expected in {diff}")
    blob = (path / BLOB).read_bytes()
    expected = param_shapes(config)
    entries = {e["name"]: e for e in manifest["tensors"]}
    missing = [n for n in expected if n not in entries]
    extra = [n for n in entries if n not in expected]
    if missing or extra:
        raise CheckpointError(f"{path}: tensor set mismatch, missing {missing[:3]}, unexpected {extra[:3]}")
    params = {}
    for name, shape in expected.items():
        e = entries[name]
        if tuple(e["shape"]) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name!r} has shape {tuple(e['shape'])}, config implies {shape}")
        nbytes = int(np.prod(shape)) * _LE_F32.itemsize
        if e["nbytes"] != nbytes:
            raise CheckpointError(f"{path}: tensor {name!r} declares {e['nbytes']} bytes, shape needs {nbytes}")
        lo = e["offset"]
        if lo < 0 or lo + nbytes > len(blob):
            raise CheckpointError(f"{path}: blob truncated at tensor {name!r}")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=int(np.prod(shape)), offset=lo).reshape(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return Model(config, params), manifest.get("metadata", {})
