"""Binary checkpoint container with a bit-exact layout.

Little-endian layout: magic ``TFCK``, u32 version, u32 entry count, then
per entry: u16 name length, name bytes (utf-8), u8 dtype code (0=f32,
1=f64), u8 rank, u32 extents * rank, raw row-major data.  Save -> load ->
save is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .optim import ParamStore

MAGIC = b"TFCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def save(path, store: ParamStore) -> None:
    names = store.names()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(names))
    for name, t in store.items():
        code = _CODES.get(t.data.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {t.data.dtype} for {name!r}")
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<BB", code, t.data.ndim)
        blob += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        blob += np.ascontiguousarray(t.data, dtype=_DTYPES[code]).tobytes()
    Path(path).write_bytes(bytes(blob))


def load(path) -> Dict[str, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", raw, pos)
        pos += 2
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=pos).reshape(shape)
        pos += n * dt.itemsize
        out[name] = arr.copy()
    if pos != len(raw):
        raise CheckpointError("trailing bytes in checkpoint")
    return out


def load_into(path, store: ParamStore) -> None:
    """Strict load: the name sets and shapes must match exactly."""
    arrays = load(path)
    names = set(store.names())
    if set(arrays) != names:
        missing = names - set(arrays)
        extra = set(arrays) - names
        raise CheckpointError(f"checkpoint/model mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    for name, t in store.items():
        a = arrays[name]
        if a.shape != t.data.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {a.shape} vs {t.data.shape}")
        t.data[...] = a.astype(t.data.dtype, copy=False)
