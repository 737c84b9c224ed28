"""Binary weight files.

Layout, all integers little-endian::

    b"MSCF" | u32 version (=1) | u32 entry count
    entry: u32 name length | utf-8 name | u8 rank | u32 dims[rank] | f64 data (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .layers import Module

MAGIC = b"MSCF"
VERSION = 1


class WeightFileError(ValueError):
    code = "weight-file"


class BadMagicError(WeightFileError):
    code = "bad-magic"


class UnsupportedVersionError(WeightFileError):
    code = "bad-version"


class TruncatedError(WeightFileError):
    code = "truncated"

    def __init__(self, entry: int, detail: str = ""):
        super().__init__(f"truncated at entry {entry}" + (f" ({detail})" if detail else ""))
        self.entry = entry


class CensusMismatchError(WeightFileError):
    code = "census-mismatch"


def encode(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise TruncatedError(0, "header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported weight file version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def take(n, i, what):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(i, what)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    for i in range(count):
        (nlen,) = struct.unpack("<I", take(4, i, "name length"))
        name = take(nlen, i, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, i, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, i, "dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * n, i, "data"), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(dims)
    if pos != len(buf):
        raise WeightFileError(f"{len(buf) - pos} trailing bytes after {count} entries")
    return out


def state_of(net: Module) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in net.named_parameters()}


def save_weights(source: Union[Module, dict], path) -> None:
    entries = state_of(source) if isinstance(source, Module) else source
    Path(path).write_bytes(encode(entries))


def load_weights(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def load_into(net: Module, source) -> None:
    """Copy a weight file (path or decoded dict) into ``net``; names and shapes must match exactly."""
    entries = source if isinstance(source, dict) else load_weights(source)
    params = dict(net.named_parameters())
    for name in params:
        if name not in entries:
            raise CensusMismatchError(f"census mismatch: missing entry {name!r}")
    for name in entries:
        if name not in params:
            raise CensusMismatchError(f"census mismatch: extra entry {name!r}")
    for name, p in params.items():
        if entries[name].shape != p.shape:
            raise CensusMismatchError(f"census mismatch: {name!r} has shape {entries[name].shape}, expected {p.shape}")
    for name, p in params.items():
        p.data[...] = entries[name]
