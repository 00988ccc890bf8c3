"""Flat binary container for named float64 tensors.

Layout: the magic string ``SPOA1``, then per tensor a little-endian u32 name
length, the UTF-8 name bytes, four little-endian u32 shape dims, and the
row-major little-endian float64 payload.  Arrays with fewer than four axes
are stored with leading dims of 1; callers that need the original rank
reshape on load.  Round trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SPOA1"


class CheckpointError(ValueError):
    """Container is corrupt, truncated or not a checkpoint at all."""


def _to_4d(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > 4:
        raise CheckpointError(f"cannot store {arr.ndim}-d tensor")
    shape = (1,) * (4 - arr.ndim) + arr.shape
    return arr.reshape(shape)


def save_tensors(path, tensors: dict) -> None:
    """Write named tensors in a fixed (insertion) order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            arr4 = _to_4d(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<4I", *arr4.shape))
            fh.write(arr4.astype("<f8", copy=False).tobytes())


def load_tensors(path) -> dict:
    """Read a container back as ``{name: 4-d float64 array}``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a SPOA1 checkpoint")
    out = {}
    off = len(MAGIC)
    while off < len(blob):
        if off + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated name length at byte {off}")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + nlen + 16 > len(blob):
            raise CheckpointError(f"{path}: truncated record header at byte {off}")
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        shape = struct.unpack_from("<4I", blob, off)
        off += 16
        count = int(np.prod(shape))
        nbytes = count * 8
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
    return out
