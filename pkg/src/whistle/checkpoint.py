"""Binary tensor container for recognizer and TLE checkpoints.

Layout: ``b"WTLE"``, u32 LE format version, u64 LE header length, a UTF-8
JSON header (model kind, config, tensor index), then raw float32 LE
payloads in index order.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .asr import AsrConfig, AsrModel
from .tle import TleConfig, TleModel

MAGIC = b"WTLE"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
KINDS = {"asr": (AsrModel, AsrConfig), "tle": (TleModel, TleConfig)}


class CheckpointError(ValueError):
    pass


def _config_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _config_from(cls, d: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise CheckpointError(f"unknown config field(s) in header: {sorted(unknown)}")
    defaults = cls()
    kw = {k: tuple(v) if isinstance(getattr(defaults, k), tuple) else v for k, v in d.items()}
    return cls(**kw)


def encode_checkpoint(model: AsrModel | TleModel) -> bytes:
    kind = getattr(model, "kind", None)
    if kind not in KINDS:
        raise CheckpointError(f"cannot checkpoint object of kind {kind!r}")
    index, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "byte_length": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "config": _config_dict(model.cfg), "tensors": index}, sort_keys=True
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def save_checkpoint(model: AsrModel | TleModel, path: str | Path) -> Path:
    """Write atomically (temp file + rename) so readers never see a partial file."""
    path = Path(path)
    data = encode_checkpoint(model)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def read_header(data: bytes) -> tuple:
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if start > len(data):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from e
    for key in ("kind", "config", "tensors"):
        if key not in header:
            raise CheckpointError(f"header lacks {key!r}")
    return header, start


def decode_checkpoint(data: bytes) -> AsrModel | TleModel:
    header, start = read_header(data)
    kind = header["kind"]
    if kind not in KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    model_cls, cfg_cls = KINDS[kind]
    try:
        cfg = _config_from(cfg_cls, header["config"])
        model = model_cls.create(cfg, 0)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"invalid config in header: {e}") from e

    payload = len(data) - start
    expected = model.state_dict()
    seen, cursor, state = set(), 0, {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        off, n = entry["offset"], entry["byte_length"]
        if name not in expected or name in seen:
            raise CheckpointError(f"unexpected or duplicate tensor {name!r}")
        if shape != tuple(expected[name].shape):
            raise CheckpointError(f"{name}: shape {shape} != {tuple(expected[name].shape)}")
        if n != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: byte length {n} does not match shape {shape}")
        if off != cursor:
            raise CheckpointError(f"{name}: offset {off} overlaps or leaves a gap (expected {cursor})")
        if off + n > payload:
            raise CheckpointError(f"{name}: payload out of bounds (truncated file?)")
        arr = np.frombuffer(data, dtype="<f4", count=n // 4, offset=start + off).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        seen.add(name)
        cursor = off + n
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"missing tensor(s): {sorted(missing)}")
    if cursor != payload:
        raise CheckpointError(f"{payload - cursor} trailing bytes after the last tensor")
    model.load_state_dict(state)
    return model


def load_checkpoint(path: str | Path, kind: str | None = None) -> AsrModel | TleModel:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    model = decode_checkpoint(path.read_bytes())
    if kind is not None and model.kind != kind:
        raise CheckpointError(f"{path} holds a {model.kind!r} model, expected {kind!r}")
    return model


__all__ = [
    "CheckpointError",
    "MAGIC",
    "VERSION",
    "decode_checkpoint",
    "encode_checkpoint",
    "load_checkpoint",
    "save_checkpoint",
]
