"""Binary checkpoint format for named float64 tensors.

Layout: 8-byte magic ``SLTF0001``, then one record per tensor:
u32 name length, UTF-8 name bytes, u32 rank, u32 per dimension, then the
row-major float64 payload. All integers and floats little-endian.
Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Parameter, check_unique_names
from .errors import DataFormatError

MAGIC = b"SLTF0001"


def save_checkpoint(params: list[Parameter], path: str) -> None:
    check_unique_names(params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for p in params:
            name = p.name.encode("utf-8")
            arr = np.asarray(p.data, dtype="<f8")
            if not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read all records; returns an insertion-ordered name -> array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise DataFormatError(
            f"{path}: bad magic at byte 0, expected {MAGIC!r}")
    out: dict[str, np.ndarray] = {}
    off = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise DataFormatError(
                f"{path}: truncated {what} at byte {off}: "
                f"need {n} bytes, {len(blob) - off} left")
        piece = blob[off:off + n]
        off += n
        return piece

    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "shape"))
        count = int(np.prod(shape)) if rank else 1
        payload = take(8 * count, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        if name in out:
            raise DataFormatError(f"{path}: duplicate tensor name {name!r}")
        out[name] = arr
    return out


def restore_parameters(params: list[Parameter], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter list by name."""
    for p in params:
        if p.name not in loaded:
            raise DataFormatError(f"checkpoint missing tensor {p.name!r}")
        arr = loaded[p.name]
        if arr.shape != p.data.shape:
            raise DataFormatError(
                f"checkpoint tensor {p.name!r} has shape {arr.shape}, "
                f"model expects {p.data.shape}")
        p.data = arr
