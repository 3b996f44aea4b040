"""Named-tensor store in the LRLB binary layout.

Layout: magic "LRLB", version u32 LE, tensor count u32 LE, then per tensor
name length u16 LE + UTF-8 name, ndim u8, dims u32 LE, f32 LE data.
Tensors are written in sorted-name order so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"LRLB"
VERSION = 1


def _as_f32(value) -> np.ndarray:
    arr = value.data if hasattr(value, "data") and not isinstance(value, np.ndarray) else value
    return np.ascontiguousarray(np.asarray(arr, dtype=np.float32))


def save(tensors: dict, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = _as_f32(tensors[name])
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name[:32]}...")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            if arr.ndim > 0xFF:
                raise CheckpointError(f"tensor {name} has too many dimensions")
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f4", copy=False).tobytes())


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {data[:4]!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", data, off)
        off += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", data, off) if ndim else ()
            off += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            out[name] = arr.copy()
        if off != len(data):
            raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
        return out
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint: {e}") from e
