"""Dense tensor primitives on top of numpy.

A "tensor" here is simply a C-contiguous ``numpy.ndarray``. This module only
adds the shape validation, seeded generation and the binary codec the rest of
the package relies on.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ParameterError, ShapeError

WIDE = np.float64
NARROW = np.float32

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    """PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int], dtype=WIDE) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=dtype)


def gaussian(shape, mean: float, std: float, rng: Rng, dtype=WIDE) -> np.ndarray:
    if std < 0:
        raise ParameterError(f"std must be non-negative, got {std}")
    shape = _check_shape(shape)
    if std == 0:
        return np.full(shape, mean, dtype=dtype)
    return rng.normal(mean, std, size=shape).astype(dtype, copy=False)


def sign(a: np.ndarray) -> np.ndarray:
    # np.sign already maps 0 -> 0
    return np.sign(a)


def signed_sqrt(a: np.ndarray) -> np.ndarray:
    return np.sign(a) * np.sqrt(np.abs(a))


_UNARY = {
    "abs": np.abs,
    "sign": sign,
    "sqrt-signed": signed_sqrt,
    "tanh": np.tanh,
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(kind: str, a, b=None) -> np.ndarray:
    a = np.asarray(a)
    if kind in _UNARY:
        if b is not None:
            raise ParameterError(f"{kind} is unary")
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ParameterError(f"{kind} needs two operands")
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        return _BINARY[kind](a, b)
    raise ParameterError(f"unknown elementwise kind {kind!r}")


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


# -- binary codec ------------------------------------------------------------
# rank (u64 LE), dims (u64 LE each), then the row-major payload in little endian.


def write_tensor(fh: BinaryIO, a: np.ndarray, dtype="<f4") -> None:
    a = np.ascontiguousarray(a)
    fh.write(struct.pack("<Q", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(a.astype(dtype, copy=False).tobytes(order="C"))


def read_tensor(fh: BinaryIO, dtype="<f4") -> np.ndarray:
    (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dt = np.dtype(dtype)
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(fh, count * dt.itemsize)
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise EOFError(f"expected {n} bytes, got {len(data)}")
    return data
