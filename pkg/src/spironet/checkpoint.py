"""Binary parameter checkpoints.

Layout (all integers little-endian u32):

    magic "SPIRO1"
    header_len, header          -- UTF-8 ``key=value`` lines, self-describing
    count
    count * [name_len, name (UTF-8), shape (4 x u32), raw values]

Values are stored little-endian in the precision declared by the header's
``precision`` key (f32 or f64). Shapes are left-padded with 1s to four
entries; the writer records the original rank in the name table order only,
so loaders reshape to their own expected shapes. Round-trips are bit-exact.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["save_tensors", "load_tensors", "CheckpointError"]

MAGIC = b"SPIRO1"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def _pack_header(precision: str, extra: dict[str, str] | None) -> bytes:
    if precision not in _DTYPES:
        raise CheckpointError(f"unknown precision {precision!r}")
    lines = [f"precision={precision}"]
    for k, v in (extra or {}).items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"invalid header entry {k!r}")
        lines.append(f"{k}={v}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_header(header: bytes) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in header.decode("utf-8").splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"bad header line {line!r}")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def save_tensors(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    precision: str,
    header_extra: dict[str, str] | None = None,
) -> None:
    dtype = _DTYPES[precision] if precision in _DTYPES else None
    if dtype is None:
        raise CheckpointError(f"unknown precision {precision!r}")
    header = _pack_header(precision, header_extra)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.ndim > 4:
                raise CheckpointError(f"{name}: rank {arr.ndim} > 4 not representable")
            shape4 = (1,) * (4 - arr.ndim) + tuple(int(d) for d in arr.shape)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<4I", *shape4))
            f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_tensors(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Returns (header key/values, name -> array with the stored 4-D shape)."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:6]!r}")
    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated at offset {off}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    meta = parse_header(take(hlen))
    if meta.get("precision") not in _DTYPES:
        raise CheckpointError(f"{path}: missing or bad precision header")
    dtype = _DTYPES[meta["precision"]]
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        shape = struct.unpack("<4I", take(16))
        n_elems = int(np.prod(shape))
        arr = np.frombuffer(take(n_elems * dtype.itemsize), dtype=dtype).reshape(shape)
        tensors[name] = arr.copy()
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return meta, tensors
