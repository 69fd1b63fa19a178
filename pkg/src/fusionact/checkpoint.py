"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"FACT"                       magic
    u32 version                   currently 1
    u32 n, n bytes                UTF-8 JSON manifest (sorted keys)
    u32 count                     number of tensor blobs
    count x blob:
        u16 len, len bytes        tensor name (UTF-8)
        u8 ndim, ndim x u32       shape
        prod(shape) x f32         values, row-major

Blobs follow the manifest's ``tensors`` list. Parameters are computed in
float64 and rounded to float32 on save; normalization statistics are kept
exactly in the manifest.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import FusionModel, Guidance, GuidanceConfig, Pathway, PathwayConfig

MAGIC = b"FACT"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, truncated or unsupported checkpoint file."""


def _kind(model: FusionModel) -> str:
    if model.is_complete():
        return "full"
    if model.static is not None and model.dynamic is None and model.guidance is None:
        return "expert-static"
    if model.dynamic is not None and model.static is None and model.guidance is None:
        return "expert-dynamic"
    raise CheckpointError("model has an unsupported combination of components")


def _tensors(model: FusionModel) -> list[tuple[str, np.ndarray]]:
    return [(n, t.data) for n, t in model.named_parameters()] + list(model.named_buffers())


def manifest_of(model: FusionModel) -> dict:
    def floats(a):
        return None if a is None else [float(v) for v in a]

    return {
        "kind": _kind(model),
        "dataset": model.dataset,
        "class_order": model.class_order,
        "static_labels": model.static_labels,
        "dynamic_labels": model.dynamic_labels,
        "in_channels": model.in_channels,
        "window_len": model.window_len,
        "static_blocks": model.static.config.block_specs if model.static else None,
        "dynamic_blocks": model.dynamic.config.block_specs if model.dynamic else None,
        "guidance_channels": model.guidance.config.dwsep_specs if model.guidance else None,
        "norm_mean": floats(model.norm_mean),
        "norm_std": floats(model.norm_std),
        "run_config": model.run_config,
        "tensors": [[name, list(arr.shape)] for name, arr in _tensors(model)],
    }


def dumps(model: FusionModel) -> bytes:
    manifest = json.dumps(manifest_of(model), sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(manifest)))
    buf.write(manifest)
    tensors = _tensors(model)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: FusionModel, path: str | os.PathLike) -> None:
    data = dumps(model)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a FusionActNet checkpoint")
    version, mlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        manifest = json.loads(r.take(mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    (count,) = r.unpack("<I")
    blobs = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last tensor blob")
    expected = [(name, tuple(shape)) for name, shape in manifest.get("tensors", [])]
    if [(n, a.shape) for n, a in blobs.items()] != expected:
        raise CheckpointError("tensor blobs do not match the manifest")
    return manifest, blobs


def read_manifest(path: str | os.PathLike) -> dict:
    return _parse(_read_bytes(path))[0]


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def loads(data: bytes) -> FusionModel:
    manifest, blobs = _parse(data)
    rng = np.random.default_rng(0)
    try:
        static = dynamic = guidance = None
        if manifest["static_blocks"]:
            static = Pathway.init(PathwayConfig(manifest["static_blocks"], len(manifest["static_labels"])), rng)
        if manifest["dynamic_blocks"]:
            dynamic = Pathway.init(PathwayConfig(manifest["dynamic_blocks"], len(manifest["dynamic_labels"])), rng)
        if manifest["guidance_channels"]:
            guidance = Guidance.init(GuidanceConfig(manifest["guidance_channels"]), rng)
        mean, std = manifest["norm_mean"], manifest["norm_std"]
        model = FusionModel(
            static,
            dynamic,
            guidance,
            list(manifest["static_labels"]),
            list(manifest["dynamic_labels"]),
            int(manifest["in_channels"]),
            int(manifest["window_len"]),
            manifest["dataset"],
            None if mean is None else np.array(mean, dtype=np.float64),
            None if std is None else np.array(std, dtype=np.float64),
            manifest.get("run_config") or {},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"manifest does not describe a valid model: {exc}") from None
    if model.class_order != manifest["class_order"]:
        raise CheckpointError("manifest class order disagrees with its label lists")
    targets = dict(_tensors(model))
    if set(targets) != set(blobs):
        raise CheckpointError("checkpoint tensors do not match the declared architecture")
    for name, arr in targets.items():
        if arr.shape != blobs[name].shape:
            raise CheckpointError(f"tensor {name} has shape {blobs[name].shape}, expected {arr.shape}")
        arr[...] = blobs[name]
    return model


def load_checkpoint(path: str | os.PathLike) -> FusionModel:
    return loads(_read_bytes(path))
