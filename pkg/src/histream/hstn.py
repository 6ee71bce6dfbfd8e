"""HSTN binary tensor files and checkpoint directories.

Layout: magic ``HSTN``, u32 version=1, u8 dtype (0 = f32), u8 rank,
rank x u32 extents, then the row-major f32 payload. All integers and floats
are little-endian.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import TensorIOError

MAGIC = b"HSTN"
VERSION = 1
DTYPE_F32 = 0


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim > 255:
        raise TensorIOError(f"rank {arr.ndim} exceeds format limit")
    header = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.astype("<f4", copy=False).tobytes())
    except OSError as exc:
        raise TensorIOError(f"cannot write tensor file {path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise TensorIOError(f"cannot read tensor file {path}: {exc}") from exc
    if len(data) < 10 or data[:4] != MAGIC:
        raise TensorIOError(f"{path}: not an HSTN file")
    version, dtype, rank = struct.unpack_from("<IBB", data, 4)
    if version != VERSION:
        raise TensorIOError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorIOError(f"{path}: unsupported dtype code {dtype}")
    offset = 10
    if len(data) < offset + 4 * rank:
        raise TensorIOError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = data[offset:]
    if len(payload) != 4 * count:
        raise TensorIOError(f"{path}: payload holds {len(payload)} bytes, expected {4 * count}")
    arr = np.frombuffer(payload, dtype="<f4", count=count)
    return arr.reshape(dims).astype(np.float32, copy=True)


def write_dir(dirpath, tensors: dict) -> None:
    """One .hstn file per named tensor."""
    os.makedirs(dirpath, exist_ok=True)
    for name, arr in tensors.items():
        write_tensor(os.path.join(dirpath, f"{name}.hstn"), arr)


def read_dir(dirpath) -> dict:
    out = {}
    try:
        entries = sorted(os.listdir(dirpath))
    except OSError as exc:
        raise TensorIOError(f"cannot list checkpoint dir {dirpath}: {exc}") from exc
    for entry in entries:
        if entry.endswith(".hstn"):
            out[entry[: -len(".hstn")]] = read_tensor(os.path.join(dirpath, entry))
    return out
