"""Named-tensor checkpoint container.

Binary layout (all integers little-endian):

    magic   4 bytes  "B2BD"
    version u16
    count   u32
    then per tensor:
        name_len u16, name bytes (utf-8),
        dtype u8 (0 = float32), rank u8, dims u32 * rank,
        payload: raw little-endian float32 values

Save/load round-trips bitwise. Trailing bytes after the last tensor are an
error. Writers take a sibling ``.lock`` file and replace the target
atomically so concurrent invocations never observe a torn file.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"B2BD"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, tensors):
    """Write an ordered ``{name: float32 array}`` map to ``path``."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<BB", DTYPE_F32, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()

    lock = path + ".lock"
    fd = None
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(bytes(blob))
        os.replace(tmp, path)
    except FileExistsError:
        raise CheckpointError(f"checkpoint {path} is locked by another writer") from None
    finally:
        if fd is not None:
            os.close(fd)
            os.unlink(lock)


def load_tensors(path):
    """Read a checkpoint back into an ordered ``{name: array}`` map."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack_from("<H", blob, 4)[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    count = struct.unpack_from("<I", blob, 6)[0]
    off = 10
    out = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            dtype, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            if dtype != DTYPE_F32:
                raise CheckpointError(f"{path}: unknown dtype code {dtype} for {name!r}")
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            payload = blob[off : off + 4 * n]
            if len(payload) != 4 * n:
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            off += 4 * n
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        except struct.error:
            raise CheckpointError(f"{path}: truncated checkpoint") from None
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes after last tensor")
    return out


def seed_to_limbs(seed):
    """Encode a 64-bit seed as four 16-bit limbs, exact in float32."""
    s = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.asarray([(s >> (16 * i)) & 0xFFFF for i in range(4)], np.float32)


def limbs_to_seed(arr):
    limbs = [int(round(float(v))) for v in np.asarray(arr).reshape(-1)]
    return sum((l & 0xFFFF) << (16 * i) for i, l in enumerate(limbs[:4]))
