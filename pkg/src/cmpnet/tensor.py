"""Dense float64 tensors, a seeded RNG, and the CMPT binary blob format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here add the shape checks the rest of the package relies on. Activations
use NCHW order: (batch, channel, height, width).
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import FormatError, ShapeError

DTYPE = np.float64
MAGIC = b"CMPT"
VERSION = 1
MAX_RANK = 4

Tensor = np.ndarray


def _check_shape(shape) -> tuple:
    shape = tuple(int(d) for d in shape)
    if not 1 <= len(shape) <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got shape {shape}")
    if any(d <= 0 for d in shape):
        raise ShapeError(f"extents must be positive, got shape {shape}")
    return shape


def zeros(shape) -> Tensor:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def full(shape, value: float) -> Tensor:
    return np.full(_check_shape(shape), value, dtype=DTYPE)


def as_tensor(values) -> Tensor:
    return np.ascontiguousarray(values, dtype=DTYPE)


class Rng:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    PCG64 output for a given seed is fixed by numpy's stream-compatibility
    policy, so draws are identical across runs and platforms. ``child(i)``
    derives an independent stream keyed on (seed, i) for per-sample work.
    """

    def __init__(self, seed: int | Sequence[int] = 0):
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    def child(self, index: int) -> "Rng":
        base = list(self.seed) if isinstance(self.seed, (list, tuple)) else [int(self.seed)]
        return Rng(base + [int(index)])

    def random(self, shape) -> Tensor:
        return self._gen.random(shape, dtype=DTYPE)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> Tensor:
        return uniform(self, shape, lo, hi)

    def integers(self, lo: int, hi: int, size=None):
        """Integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=size)

    def normal(self, shape, loc: float = 0.0, scale: float = 1.0) -> Tensor:
        return self._gen.normal(loc, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def uniform(rng: Rng, shape, lo: float, hi: float) -> Tensor:
    shape = _check_shape(shape)
    if not lo <= hi:
        raise ValueError(f"uniform requires lo <= hi, got lo={lo}, hi={hi}")
    if lo == hi:
        return full(shape, lo)
    out = lo + (hi - lo) * rng.random(shape)
    # lo + (hi-lo)*u can round up to hi; keep the interval half-open
    np.minimum(out, np.nextafter(hi, lo), out=out)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def apply(t: Tensor, f: Callable[[float], float]) -> Tensor:
    """Elementwise map of a scalar function (vectorized if ``f`` is a ufunc)."""
    if isinstance(f, np.ufunc):
        return f(t).astype(DTYPE)
    return np.vectorize(f, otypes=[DTYPE])(t)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return a - b


def scale(a: Tensor, factor: float) -> Tensor:
    return a * factor


# ---------------------------------------------------------------------------
# CMPT blobs: b"CMPT", u32 version, u32 rank, rank x u32 extents,
# then little-endian float64 payload in row-major order.


def tensor_to_bytes(t: Tensor) -> bytes:
    shape = _check_shape(t.shape)
    header = MAGIC + struct.pack("<II", VERSION, len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    return header + np.ascontiguousarray(t, dtype="<f8").tobytes()


def read_tensor(stream: BinaryIO) -> Tensor:
    def take(n: int) -> bytes:
        buf = stream.read(n)
        if len(buf) != n:
            raise FormatError(f"truncated CMPT blob: wanted {n} bytes, got {len(buf)}")
        return buf

    if take(4) != MAGIC:
        raise FormatError("bad magic, not a CMPT blob")
    version, rank = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported CMPT version {version}")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"CMPT rank {rank} out of range")
    shape = struct.unpack(f"<{rank}I", take(4 * rank))
    if any(d == 0 for d in shape):
        raise FormatError(f"CMPT blob has zero extent: {shape}")
    count = int(np.prod(shape))
    data = np.frombuffer(take(8 * count), dtype="<f8")
    return data.astype(DTYPE).reshape(shape)


def tensor_from_bytes(blob: bytes) -> Tensor:
    import io

    stream = io.BytesIO(blob)
    t = read_tensor(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after CMPT blob")
    return t


def blob_size(shape) -> int:
    return 12 + 4 * len(shape) + 8 * int(np.prod(shape))


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    try:
        with open(path, "rb") as fh:
            return tensor_from_bytes(fh.read())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
