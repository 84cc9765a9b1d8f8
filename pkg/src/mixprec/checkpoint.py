"""Flat binary checkpoint container for named arrays.

Layout (all integers little-endian):

    magic   4 bytes  b"EDMP"
    version u32      currently 1
    vwidth  u8       bytes per value: 4 (float32) or 8 (float64)
    repeat until EOF:
        name_len u32
        name     UTF-8 bytes
        rank     u32
        extents  rank * u64
        values   product(extents) * vwidth bytes, little-endian floats
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"EDMP"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


def save_checkpoint(path, tensors: dict) -> None:
    """Write named arrays (a name -> ndarray mapping) to ``path``."""
    arrays = {name: np.asarray(a) for name, a in tensors.items()}
    if not arrays:
        raise CheckpointError("refusing to write an empty checkpoint")
    widths = {a.dtype.itemsize for a in arrays.values()}
    if len(widths) != 1 or widths & {4, 8} != widths:
        raise CheckpointError(f"tensors must share one float width, got {widths}")
    vwidth = widths.pop()
    dtype = np.dtype(f"<f{vwidth}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IB", VERSION, vwidth))
        for name, a in arrays.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
            f.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back into an ordered name -> ndarray mapping."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r} at offset 0, expected {MAGIC!r}")
    if len(blob) < 9:
        raise CheckpointError("truncated header")
    version, vwidth = struct.unpack_from("<IB", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    if vwidth not in (4, 8):
        raise CheckpointError(f"unsupported value width {vwidth}")
    dtype = np.dtype(f"<f{vwidth}")
    out: dict[str, np.ndarray] = {}
    pos = 9
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        extents = struct.unpack_from(f"<{rank}Q", blob, pos) if rank else ()
        pos += 8 * rank
        count = int(np.prod(extents, dtype=np.int64)) if rank else 1
        nbytes = count * vwidth
        if pos + nbytes > len(blob):
            raise CheckpointError(f"tensor '{name}' truncated at offset {pos}")
        out[name] = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(extents).copy()
        pos += nbytes
    return out
