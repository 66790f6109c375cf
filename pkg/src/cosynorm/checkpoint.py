"""Binary checkpoint format.

Layout: magic "COSYNORM1", u32 record count, then per parameter:
u32 name length, UTF-8 name, u32 rank, rank u32 dims, raw float32 data.
All integers little-endian. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"COSYNORM1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: "OrderedDict[str, np.ndarray]") -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr32 = np.asarray(arr, dtype="<f4")
        if not arr32.flags.c_contiguous:
            arr32 = np.ascontiguousarray(arr32)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr32.ndim))
        chunks.append(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        chunks.append(arr32.tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint: {path}")
        out = data[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_vals = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n_vals), dtype="<f4").reshape(dims).copy()
        state[name] = arr
    if pos != len(data):
        raise CheckpointError(f"trailing bytes in checkpoint: {path}")
    return state
