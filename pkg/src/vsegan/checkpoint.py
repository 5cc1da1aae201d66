"""VSGN checkpoint container.

Layout (all integers little-endian)::

    b"VSGN"  u32 version  u64 payload_length
    payload:
        u32 n  + n bytes UTF-8 JSON metadata (config, counters, norm stats)
        u32 record_count
        records: u16 name_len, name, u8 dtype, u8 rank, u32 dims[rank], raw values
        u32 n  + n bytes UTF-8 JSON rng state
    u32 CRC-32 of every preceding byte

JSON is written with sorted keys and no whitespace so that saving a loaded
checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"VSGN"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(ckpt: Checkpoint) -> bytes:
    parts = []
    meta = _json_bytes(ckpt.meta)
    parts.append(struct.pack("<I", len(meta)) + meta)
    parts.append(struct.pack("<I", len(ckpt.arrays)))
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in DTYPE_CODES:
            raise TypeError(f"cannot store {name} with dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", DTYPE_CODES[np.dtype(dt)], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    rng = _json_bytes(ckpt.rng_state)
    parts.append(struct.pack("<I", len(rng)) + rng)
    payload = b"".join(parts)
    body = _HEADER.pack(MAGIC, VERSION, len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, offset: int, end: int):
        self.data, self.pos, self.end = data, offset, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise IntegrityError("checkpoint payload is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def json(self):
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"malformed JSON block: {exc}") from exc


def decode(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size + 4:
        raise IntegrityError("file too short to be a checkpoint")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}")
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    end = _HEADER.size + length
    if len(data) != end + 4:
        raise IntegrityError(f"checkpoint is truncated or padded ({len(data)} bytes, expected {end + 4})")
    (stored,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != stored:
        raise IntegrityError("checkpoint CRC-32 mismatch")

    r = _Reader(data, _HEADER.size, end)
    meta = r.json()
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in CODE_DTYPES:
            raise IntegrityError(f"unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        dt = CODE_DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(size), dtype=dt).reshape(dims).copy()
    rng_state = r.json()
    if r.pos != end:
        raise IntegrityError("trailing bytes inside checkpoint payload")
    return Checkpoint(meta, arrays, rng_state)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise IntegrityError(f"checkpoint {path} does not exist") from exc
    return decode(data)
