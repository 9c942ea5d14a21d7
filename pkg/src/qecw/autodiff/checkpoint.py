"""Versioned binary container for named tensors, masks and JSON metadata.

Layout (little-endian)::

    b"QECK" | u16 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 n_entries, then per entry:
    u8 kind (0 tensor, 1 mask bitset) | u16 name_len | name | u8 dtype tag
    | u8 ndim | u32 dims[ndim] | u64 n_bytes | raw bytes
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"QECK"
VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.int32, 4: np.uint8}
_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}
_BITSET = 5


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _entry(kind: int, name: str, tag: int, shape, payload: bytes) -> bytes:
    raw = name.encode()
    return (struct.pack("<BH", kind, len(raw)) + raw + struct.pack("<BB", tag, len(shape))
            + struct.pack(f"<{len(shape)}I", *shape) + struct.pack("<Q", len(payload)) + payload)


def encode(ck: Checkpoint) -> bytes:
    meta = json.dumps(ck.metadata, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta,
             struct.pack("<I", len(ck.tensors) + len(ck.masks))]
    for name, arr in ck.tensors.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        parts.append(_entry(0, name, tag, arr.shape, np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()))
    for name, mask in ck.masks.items():
        mask = np.asarray(mask, dtype=bool)
        parts.append(_entry(1, name, _BITSET, mask.shape, np.packbits(mask.ravel(), bitorder="little").tobytes()))
    return b"".join(parts)


def decode(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{source}: truncated {what} at offset {pos} (need {n} bytes, have {len(raw) - pos})")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError(f"{source}: bad magic at offset 0")
    version, meta_len = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset 4")
    try:
        metadata = json.loads(take(meta_len, "metadata"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source}: metadata at offset 10 is not JSON ({exc})") from None
    (count,) = struct.unpack("<I", take(4, "entry count"))
    ck = Checkpoint(metadata=metadata)
    for _ in range(count):
        start = pos
        kind, name_len = struct.unpack("<BH", take(3, "entry header"))
        name = take(name_len, "entry name").decode()
        tag, ndim = struct.unpack("<BB", take(2, "entry dtype"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "entry shape"))
        (n_bytes,) = struct.unpack("<Q", take(8, "entry size"))
        payload = take(n_bytes, f"payload of {name!r}")
        if kind == 1 and tag == _BITSET:
            n = int(np.prod(shape, dtype=np.int64))
            bits = np.unpackbits(np.frombuffer(payload, np.uint8), count=n, bitorder="little")
            ck.masks[name] = bits.astype(bool).reshape(shape)
        elif kind == 0 and tag in _DTYPES:
            dt = np.dtype(_DTYPES[tag]).newbyteorder("<")
            expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if expected != n_bytes:
                raise FormatError(f"{source}: entry {name!r} at offset {start} has {n_bytes} bytes, expected {expected}")
            ck.tensors[name] = np.frombuffer(payload, dt).astype(_DTYPES[tag]).reshape(shape)
        else:
            raise FormatError(f"{source}: entry {name!r} at offset {start} has unknown kind/dtype {kind}/{tag}")
    if pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - pos} trailing bytes at offset {pos}")
    return ck


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), str(path))
