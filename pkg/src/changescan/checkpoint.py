"""Flat binary parameter store plus a JSON sidecar for the model config.

Layout, all little-endian: 6-byte magic "2DMCG\\0", format version
(u32), parameter count (u64), then per parameter: name byte-length
(u32), utf-8 name, rank (u32), one u64 per extent, and the raw float32
payload.  Records are sorted by name so equal parameter sets produce
byte-identical files.  The sidecar at <path>.json carries the model
configuration needed to rebuild the network before restoring.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"2DMCG\x00"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


class ConfigError(ValueError):
    """The checkpoint does not fit the model it is being loaded into."""


def sidecar_path(path) -> str:
    return str(path) + ".json"


def save_checkpoint(path, named_params, model_config=None) -> None:
    """Write (name, tensor-or-array) pairs; optionally a config sidecar."""
    records = sorted(((str(n), np.asarray(getattr(p, "data", p)))
                      for n, p in named_params), key=lambda r: r[0])
    names = [n for n, _ in records]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(records)))
        for name, arr in records:
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<Q", ext))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if model_config is not None:
        with open(sidecar_path(path), "w") as fh:
            json.dump({"format_version": VERSION,
                       "model": model_config.to_dict()}, fh, indent=2)
            fh.write("\n")


def _take(buf: memoryview, offset: int, count: int):
    if offset + count > len(buf):
        raise CheckpointError(
            f"truncated checkpoint: wanted {count} bytes at {offset}, "
            f"file holds {len(buf)}")
    return buf[offset:offset + count], offset + count


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into {name: float32 array}."""
    try:
        with open(path, "rb") as fh:
            buf = memoryview(fh.read())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no such checkpoint: {path}") from exc
    head, off = _take(buf, 0, len(MAGIC))
    if bytes(head) != MAGIC:
        raise CheckpointError(f"bad magic {bytes(head)!r} in {path}")
    raw, off = _take(buf, off, 4)
    version = struct.unpack("<I", raw)[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    raw, off = _take(buf, off, 8)
    count = struct.unpack("<Q", raw)[0]
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, off = _take(buf, off, 4)
        nlen = struct.unpack("<I", raw)[0]
        raw, off = _take(buf, off, nlen)
        name = bytes(raw).decode("utf-8")
        raw, off = _take(buf, off, 4)
        rank = struct.unpack("<I", raw)[0]
        shape = []
        for _ in range(rank):
            raw, off = _take(buf, off, 8)
            shape.append(struct.unpack("<Q", raw)[0])
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw, off = _take(buf, off, 4 * size)
        if name in out:
            raise CheckpointError(f"duplicate parameter {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes in {path}")
    return out


def load_model_config(path):
    """The ModelConfig stored beside a checkpoint, or None if absent."""
    from .model import ModelConfig
    side = sidecar_path(path)
    if not os.path.exists(side):
        return None
    with open(side) as fh:
        payload = json.load(fh)
    return ModelConfig.from_dict(payload["model"])


def restore(model, path) -> None:
    """Load a checkpoint into a constructed model, strictly by name."""
    stored = load_checkpoint(path)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(stored))
    surplus = sorted(set(stored) - set(params))
    if missing or surplus:
        raise ConfigError(
            f"checkpoint does not fit model: missing {missing[:3]}, "
            f"surplus {surplus[:3]}")
    for name, p in params.items():
        arr = stored[name]
        if arr.shape != p.shape:
            raise ConfigError(
                f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
        p.data[...] = arr
