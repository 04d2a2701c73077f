"""Binary checkpoint format.

Layout, all little-endian::

    b"XMCK"                       magic
    u32                           format version
    u8                            model kind tag
    u32 + bytes                   UTF-8 JSON config blob
    u32                           entry count
    per entry:
        u32 + bytes               UTF-8 parameter name
        u8                        rank
        u32 * rank                dims
        f64 * prod(dims)          values, row-major
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"XMCK"
VERSION = 1
KIND_TAGS = {"cross": 0, "early": 1, "dual": 2}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]


def _write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def dumps(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in KIND_TAGS:
        raise CheckpointError(f"unknown model kind {ckpt.kind!r}")
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<IB", VERSION, KIND_TAGS[ckpt.kind]))
    _write_str(fh, json.dumps(ckpt.config, sort_keys=True))
    fh.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        _write_str(fh, name)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())
    return fh.getvalue()


def loads(raw: bytes) -> Checkpoint:
    fh = io.BytesIO(raw)
    if _read_exact(fh, 4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, tag = struct.unpack("<IB", _read_exact(fh, 5))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if tag not in TAG_KINDS:
        raise CheckpointError(f"unknown model kind tag {tag}")
    config = json.loads(_read_str(fh))
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    tensors = {}
    for _ in range(count):
        name = _read_str(fh)
        (rank,) = struct.unpack("<B", _read_exact(fh, 1))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
        n = math.prod(dims)
        values = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").astype(np.float64)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = values.reshape(dims)
    if fh.read(1):
        raise CheckpointError("trailing bytes after last entry")
    return Checkpoint(TAG_KINDS[tag], config, tensors)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path: str | Path) -> Checkpoint:
    try:
        return loads(Path(path).read_bytes())
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def from_model(model, config: Mapping) -> Checkpoint:
    return Checkpoint(model.kind, dict(config), {n: p.value.copy() for n, p in model.param_dict().items()})


def load_into(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into ``model``; kinds, names and shapes must match exactly."""
    if ckpt.kind != model.kind:
        raise CheckpointError(f"checkpoint holds a {ckpt.kind!r} model, expected {model.kind!r}")
    params = model.param_dict()
    for name in params:
        if name not in ckpt.tensors:
            raise CheckpointError(f"parameter {name!r} missing from checkpoint")
    for name in ckpt.tensors:
        if name not in params:
            raise CheckpointError(f"checkpoint tensor {name!r} has no matching parameter")
    for name, p in params.items():
        arr = ckpt.tensors[name]
        if arr.shape != p.value.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {arr.shape} vs {p.value.shape}")
    for name, p in params.items():
        p.value[...] = ckpt.tensors[name]
