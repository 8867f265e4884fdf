"""Differentiable operators with explicit forward/backward pairs.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` takes the upstream gradient plus that cache. Operators do
not hold state; batch norm running statistics live in :class:`BnState` and
dropout masks are drawn from a caller-supplied :class:`~cmpnet.tensor.Rng`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import DTYPE, Rng, uniform

Group = Literal["conv", "fc"]
Mode = Literal["train", "eval"]


@dataclass
class ParamTensor:
    value: np.ndarray
    group: Group = "fc"
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class BnState:
    gamma: ParamTensor
    beta: ParamTensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, group: Group = "fc", momentum=0.1, epsilon=1e-5):
        return cls(
            gamma=ParamTensor(np.ones(channels), group),
            beta=ParamTensor(np.zeros(channels), group),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon=epsilon,
        )


def init_weight(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return uniform(rng, shape, -bound, bound)


# --- convolution -----------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or stride < 1:
        raise ShapeError(
            f"conv geometry impossible: size={size}, kernel={kernel}, stride={stride}, pad={pad}"
        )
    return span // stride + 1


def _im2col(x, kh, kw, stride, pad):
    B, C, H, W = x.shape
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # (B, C, Ho, Wo, kh, kw) -> (B*Ho*Wo, C*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


def conv2d_forward(x, w, b, stride: int = 1, pad: int = 0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[0]} filters")
    Cout, _, kh, kw = w.shape
    B = x.shape[0]
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(Cout, -1).T + b
    y = out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (x.shape, cols, w, stride, pad)


def conv2d_backward(dy, cache):
    """Returns ``(dx, dw, db)``."""
    x_shape, cols, w, stride, pad = cache
    B, C, H, W = x_shape
    Cout, _, kh, kw = w.shape
    Ho, Wo = dy.shape[2], dy.shape[3]
    dflat = dy.transpose(0, 2, 3, 1).reshape(-1, Cout)
    db = dflat.sum(axis=0)
    dw = (dflat.T @ cols).reshape(w.shape)
    dcols = (dflat @ w.reshape(Cout, -1)).reshape(B, Ho, Wo, C, kh, kw)
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


# --- spatial pooling -------------------------------------------------------


def maxpool2d_forward(x, kernel: int = 2, stride: int = 2):
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    Ho = conv_output_size(H, kernel, stride, 0)
    Wo = conv_output_size(W, kernel, stride, 0)
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :Ho, :Wo].reshape(B, C, Ho, Wo, kernel * kernel)
    idx = np.argmax(win, axis=-1)  # row-major window order, first max wins
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), (x.shape, idx, kernel, stride)


def maxpool2d_backward(dy, cache):
    x_shape, idx, kernel, stride = cache
    Ho, Wo = dy.shape[2], dy.shape[3]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for pos in range(kernel * kernel):
        di, dj = divmod(pos, kernel)
        dx[:, :, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride] += np.where(
            idx == pos, dy, 0.0
        )
    return dx


def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise ShapeError(f"global average pooling expects a 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avg_pool_backward(dy, x_shape):
    M, N = x_shape[2], x_shape[3]
    return np.broadcast_to(dy / (M * N), x_shape).copy()


# --- fully connected -------------------------------------------------------


def dense_forward(x, w, b):
    """``y = flatten(x) @ w.T + b`` with ``w`` of shape (out, in)."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"dense: {flat.shape[1]} input features vs weight {w.shape}, bias {b.shape}"
        )
    return flat @ w.T + b, (x.shape, flat, w)


def dense_backward(dy, cache):
    """Returns ``(dx, dw, db)``; ``dx`` has the un-flattened input shape."""
    x_shape, flat, w = cache
    return (dy @ w).reshape(x_shape), dy.T @ flat, dy.sum(axis=0)


# --- batch normalization ---------------------------------------------------


def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"batchnorm expects a 2-D or 4-D input, got {x.shape}")


def batchnorm_forward(x, bn: BnState, mode: Mode = "train"):
    """Per-channel normalization over the batch (and spatial) axes.

    In train mode the running statistics are updated in place using the
    biased batch variance, which keeps ``running_var`` positive.
    """
    axes, bshape = _bn_axes(x)
    if x.shape[1] != bn.gamma.value.shape[0]:
        raise ShapeError(f"batchnorm: {x.shape[1]} channels vs {bn.gamma.value.shape[0]} params")
    gamma = bn.gamma.value.reshape(bshape)
    beta = bn.beta.value.reshape(bshape)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = bn.momentum
        bn.running_mean[...] = (1 - m) * bn.running_mean + m * mean
        bn.running_var[...] = (1 - m) * bn.running_var + m * var
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.epsilon)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    return gamma * xhat + beta, (xhat, inv_std, gamma, axes, bshape, mode)


def batchnorm_backward(dy, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, axes, bshape, mode = cache
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if mode != "train":
        return dxhat * inv_std.reshape(bshape), dgamma, dbeta
    m = dy.size // dbeta.size
    dx = (inv_std.reshape(bshape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return dx, dgamma, dbeta


# --- activations, dropout, loss ---------------------------------------------


def elu_forward(x, alpha: float = 1.0):
    y = np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))
    return y, (x, alpha)


def elu_backward(dy, cache):
    x, alpha = cache
    return dy * np.where(x > 0, 1.0, alpha * np.exp(np.minimum(x, 0.0)))


def dropout_forward(x, p: float = 0.5, mode: Mode = "train", rng: Rng | None = None):
    """Inverted dropout; the cache is the scaled keep-mask (``None`` in eval)."""
    if mode != "train" or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(B), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(B), labels] -= 1.0
    return float(loss), grad / B
