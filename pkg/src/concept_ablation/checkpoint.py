"""Checkpoint files: a JSON manifest plus a little-endian float64 blob.

``save_checkpoint(model, "run/model.ckpt")`` writes ``run/model.ckpt`` (the
manifest) and ``run/model.ckpt.bin``. The manifest records the format tag,
architecture sizes, and each parameter's name, shape and byte offset in blob
order.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .diffusion import Denoiser, DenoiserConfig
from .numerics import ParamSet

FORMAT = "concept-ablation-checkpoint/1"


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedBlob(CheckpointError):
    pass


class ShapeDisagreement(CheckpointError):
    pass


def blob_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".bin")


def save_checkpoint(model: Denoiser, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(model.params.params):
        arr = np.ascontiguousarray(model.params.params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": FORMAT,
        "config": dataclasses.asdict(model.config),
        "blob": blob_path(path).name,
        "total_bytes": offset,
        "params": entries,
    }
    blob_path(path).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> Denoiser:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise VersionMismatch(f"checkpoint format {manifest.get('format')!r}, expected {FORMAT!r}")
    blob = (path.parent / manifest["blob"]).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise TruncatedBlob(f"blob has {len(blob)} bytes, manifest declares {manifest['total_bytes']}")
    config = DenoiserConfig(**manifest["config"])
    params = {}
    for e in manifest["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * 8 != e["nbytes"]:
            raise ShapeDisagreement(f"{e['name']}: shape {e['shape']} needs {count * 8} bytes, entry declares {e['nbytes']}")
        if e["offset"] + e["nbytes"] > len(blob):
            raise TruncatedBlob(f"{e['name']} extends past the end of the blob")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    expected = Denoiser.init(config, np.random.default_rng(0)).params.params
    for name, arr in expected.items():
        if name not in params:
            raise ShapeDisagreement(f"checkpoint lacks parameter {name!r}")
        if params[name].shape != arr.shape:
            raise ShapeDisagreement(f"{name}: checkpoint shape {params[name].shape} != architecture shape {arr.shape}")
    return Denoiser(config, ParamSet(params))
