"""AFSC checkpoint files: named float32 tensors, little-endian."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import FormatError

AFSC_MAGIC = b"AFSC"
AFSC_VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [AFSC_MAGIC, struct.pack("<II", AFSC_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be stored (name or rank too large)")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    def need(off, n, what):
        if off + n > len(buf):
            raise FormatError(f"{source}: truncated {what} at byte offset {off}")

    need(0, 12, "header")
    if buf[:4] != AFSC_MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r} at byte offset 0")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != AFSC_VERSION:
        raise FormatError(f"{source}: unsupported version {version} at byte offset 4")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(off, 2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen + 1, "name")
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        if name in out:
            raise FormatError(f"{source}: duplicate tensor {name!r} at byte offset {off - nlen}")
        rank = buf[off]
        off += 1
        need(off, 4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        need(off, 4 * size, f"data of {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float64)
        off += 4 * size
    if off != len(buf):
        raise FormatError(f"{source}: {len(buf) - off} trailing bytes at byte offset {off}")
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
