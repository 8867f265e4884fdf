"""Channel max pooling.

Output channel ``i`` is the per-pixel maximum over the contiguous input
channel window ``[i*s, i*s + k - 1]``. With ``C`` input channels and
compression factor ``r`` there are ``ceil(C/r)`` windows, and the kernel
size is fixed by requiring the last window to end on channel ``C - 1``::

    k = C - s * (ceil(C / r) - 1)

Windows overlap when ``k > s``, tile exactly when ``k == s`` and skip
channels when ``k < s``.
"""
from __future__ import annotations

import math
import numbers
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidCmpConfig, NoValidStride, ShapeError

SNAP_TOL = 1e-9


def ceil_ratio(C: int, r: float) -> int:
    """ceil(C / r), treating quotients within 1e-9 of an integer as exact."""
    q = C / r
    nearest = round(q)
    if abs(q - nearest) <= SNAP_TOL:
        return int(nearest)
    return math.ceil(q)


def _require_int(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class CmpConfig:
    in_channels: int
    compression_factor: float
    stride: int
    out_channels: int
    kernel_size: int

    @property
    def gaps(self) -> bool:
        """True when some input channels fall in no window (k < s)."""
        return self.kernel_size < self.stride

    def window(self, i: int) -> range:
        start = i * self.stride
        return range(start, start + self.kernel_size)

    def uncovered_channels(self) -> list[int]:
        covered = set()
        for i in range(self.out_channels):
            covered.update(self.window(i))
        return [c for c in range(self.in_channels) if c not in covered]


def make_cmp_config(C: int, r: float, s: int) -> CmpConfig:
    C = _require_int("C", C)
    s = _require_int("s", s)
    r = float(r)
    if C <= 1:
        raise ValueError(f"C must be > 1, got {C}")
    if not r > 1:
        raise ValueError(f"r must be > 1, got {r}")
    if s <= 1:
        raise ValueError(f"s must be > 1, got {s}")
    out = ceil_ratio(C, r)
    k = C - s * (out - 1)
    if k < 1:
        raise InvalidCmpConfig(C, r, s, k)
    return CmpConfig(C, r, s, out, k)


def suggest_stride(C: int, r: float) -> int:
    """Stride giving a near-uniform partition of the channels into ceil(C/r) windows."""
    C = _require_int("C", C)
    if C <= 1 or not float(r) > 1:
        raise ValueError(f"need C > 1 and r > 1, got C={C}, r={r}")
    out = ceil_ratio(C, r)
    if out == 1:
        # single window spanning all channels; stride never applies
        return 2
    s = max(2, C // out)
    if C - s * (out - 1) < 1:
        raise NoValidStride(
            f"no stride s > 1 gives k >= 1 for C={C}, r={r:g} (ceil(C/r)={out})"
        )
    return s


@dataclass
class CmpCache:
    argmax: np.ndarray  # int64, (B, out_channels, M, N): input channel that won each output


def cmp_forward(x: np.ndarray, cfg: CmpConfig) -> tuple[np.ndarray, CmpCache]:
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"cmp expects (B, {cfg.in_channels}, M, N) input, got shape {x.shape}"
        )
    k, s = cfg.kernel_size, cfg.stride
    # (B, C-k+1, M, N, k) -> keep every s-th window start
    windows = sliding_window_view(x, k, axis=1)[:, ::s]
    assert windows.shape[1] == cfg.out_channels
    local = np.argmax(windows, axis=-1)  # first max wins ties
    y = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    starts = (np.arange(cfg.out_channels) * s)[None, :, None, None]
    return np.ascontiguousarray(y), CmpCache(argmax=local + starts)


def cmp_backward(grad_y: np.ndarray, cache: CmpCache, cfg: CmpConfig) -> np.ndarray:
    am = cache.argmax
    if grad_y.shape != am.shape or am.shape[1] != cfg.out_channels:
        raise ShapeError(
            f"cmp backward: grad shape {grad_y.shape} does not match cache {am.shape}"
        )
    B, _, M, N = grad_y.shape
    grad_x = np.zeros((B, cfg.in_channels, M, N), dtype=grad_y.dtype)
    bb, mm, nn = np.ogrid[:B, :M, :N]
    # within one output channel every (b, m, n) hits a distinct input cell,
    # so plain fancy-index accumulation is safe; overlaps add across windows
    for i in range(cfg.out_channels):
        grad_x[bb, am[:, i], mm, nn] += grad_y[:, i]
    return grad_x
