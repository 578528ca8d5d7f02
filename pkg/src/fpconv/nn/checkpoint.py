"""Flat binary checkpoint format.

Layout (all integers little-endian)::

    b"FPCK"  u32 version
    repeated until EOF:
        u32 name_length, name bytes (UTF-8)
        u32 rank, rank x u64 extents
        prod(extents) x f32 values (C order)

Records are written sorted by name. Writes go to a temporary file in the same
directory and are renamed into place only once complete.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Dict

import numpy as np

from fpconv.errors import FPConvError

MAGIC = b"FPCK"
VERSION = 1


class CheckpointError(FPConvError, IOError):
    pass


def encode_checkpoint(state: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(state):
        arr = np.asarray(state[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an FPCK checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos, state = 8, {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"truncated record {name!r}")
            state[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return state


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, state: Dict[str, np.ndarray]) -> None:
    atomic_write(path, encode_checkpoint(state))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)
