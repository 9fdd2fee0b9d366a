"""Dense rank-1..4 float32 tensors and the raw binary tensor file format.

Feature maps are rank-4 arrays in (batch, height, width, channels) order,
stored row-major so the channel index varies fastest. That layout is load
bearing: a (N,H,W,C) map viewed as a (N*H*W, C) matrix is a zero-copy
reinterpretation, which the 1x1-convolution fast path relies on.

Everything in the engine is float32; tensors are treated as immutable once an
op has produced them. `tensor_set` exists for constructing test fixtures.
"""

from __future__ import annotations

import struct

import numpy as np

MAX_RANK = 4
_MBT_MAGIC = b"MBT1"


class ShapeError(ValueError):
    """Invalid shape, index, or mismatched tensor geometry."""


class TensorFileError(ValueError):
    """Malformed raw tensor file (bad magic, truncation, bad header)."""


class NumericsError(ArithmeticError):
    """A tensor failed the all-finite invariant."""


def check_shape(dims: tuple[int, ...]) -> tuple[int, ...]:
    """Validate a shape: rank 1..4, all dims >= 1, element count fits in u64."""
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    count = 1
    for d in dims:
        count *= d
    if count >= 2**64:
        raise ShapeError(f"element count {count} overflows a 64-bit counter")
    return dims


def element_count(dims: tuple[int, ...]) -> int:
    n = 1
    for d in check_shape(dims):
        n *= d
    return n


def new_tensor(shape: tuple[int, ...], fill: float = 0.0) -> np.ndarray:
    """Allocate a C-contiguous float32 tensor with every element == fill."""
    dims = check_shape(shape)
    return np.full(dims, fill, dtype=np.float32)


def linear_offset(shape: tuple[int, ...], idx: tuple[int, ...]) -> int:
    """Row-major offset; ((n*H + h)*W + w)*C + c for rank 4."""
    dims = check_shape(shape)
    if len(idx) != len(dims):
        raise ShapeError(f"index rank {len(idx)} != tensor rank {len(dims)}")
    off = 0
    for i, d in zip(idx, dims):
        if not 0 <= i < d:
            raise ShapeError(f"index {idx} out of bounds for shape {dims}")
        off = off * d + i
    return off


def tensor_get(t: np.ndarray, idx: tuple[int, ...]) -> float:
    """Bounds-checked element read (numpy would silently wrap negatives)."""
    linear_offset(t.shape, idx)
    return float(t[idx])


def tensor_set(t: np.ndarray, idx: tuple[int, ...], value: float) -> None:
    """Bounds-checked element write; test-construction only."""
    linear_offset(t.shape, idx)
    t[idx] = np.float32(value)


def check_finite(t: np.ndarray, context: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NumericsError(f"non-finite values in {context}")
    return t


def as_f32(t: np.ndarray) -> np.ndarray:
    """Contiguous float32 view/copy of an array-like."""
    return np.ascontiguousarray(t, dtype=np.float32)


def save_raw_tensor(path: str, t: np.ndarray) -> None:
    """Write the MBT1 raw tensor format.

    Little-endian: magic "MBT1", u32 rank, rank x u32 dims, then
    count x f32 payload, row-major.
    """
    dims = check_shape(t.shape)
    data = as_f32(t)
    with open(path, "wb") as fh:
        fh.write(_MBT_MAGIC)
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(data.tobytes())


def load_raw_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MBT_MAGIC:
        raise TensorFileError(f"bad magic {blob[:4]!r}, expected {_MBT_MAGIC!r}")
    if len(blob) < 8:
        raise TensorFileError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if not 1 <= rank <= MAX_RANK:
        raise TensorFileError(f"rank {rank} outside 1..{MAX_RANK}")
    header_end = 8 + 4 * rank
    if len(blob) < header_end:
        raise TensorFileError("truncated dim list")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    try:
        count = element_count(dims)
    except ShapeError as exc:
        raise TensorFileError(f"invalid dims {dims}: {exc}") from exc
    payload = blob[header_end:]
    if len(payload) != 4 * count:
        raise TensorFileError(
            f"payload is {len(payload)} bytes, expected {4 * count} for shape {dims}"
        )
    flat = np.frombuffer(payload, dtype="<f4", count=count)
    return flat.reshape(dims).astype(np.float32, copy=True)
