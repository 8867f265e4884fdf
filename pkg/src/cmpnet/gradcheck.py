"""Central finite-difference checks for every operator's backward pass.

Each check builds a random problem, contracts the operator output with a
fixed random weight tensor to get a scalar loss, and compares the analytic
gradient with ``(L(x + h) - L(x - h)) / 2h`` element by element. Inputs to
max-type operators are built from a permutation so there are no ties.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .cmp import cmp_backward, cmp_forward, make_cmp_config
from .tensor import Rng

STEP = 1e-5
FLOOR = 1e-8


def numerical_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every element of ``x`` (mutated and restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric, floor: float = FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def distinct(rng: Rng, shape, spacing: float = 0.01) -> np.ndarray:
    """Tie-free values: a shuffled ramp with gaps of ``spacing``, centred at 0."""
    n = int(np.prod(shape))
    return ((rng.permutation(n) - n / 2) * spacing).reshape(shape).astype(np.float64)


def _check(forward, backward, inputs: dict, rng: Rng, h: float) -> float:
    """``forward(**inputs) -> (y, cache)``; ``backward(dy, cache) -> dict of grads``."""
    y, _ = forward(**inputs)
    w = rng.uniform(y.shape, -1.0, 1.0)
    y, cache = forward(**inputs)
    grads = backward(w, cache)
    worst = 0.0
    for name, value in inputs.items():
        if name not in grads:
            continue
        num = numerical_grad(lambda: float(np.sum(w * forward(**inputs)[0])), value, h)
        worst = max(worst, rel_error(grads[name], num))
    return worst


def check_cmp(seed: int = 0, h: float = STEP) -> float:
    rng = Rng(seed)
    worst = 0.0
    for C, r, s, shape in ((4, 2, 2, (2, 4, 3, 3)), (8, 3, 2, (2, 8, 2, 3)), (9, 2, 2, (1, 9, 2, 2)),
                           (12, 4, 3, (2, 12, 2, 2)), (5, 2, 2, (1, 5, 3, 2))):
        cfg = make_cmp_config(C, r, s)
        worst = max(worst, _check(
            lambda x: cmp_forward(x, cfg),
            lambda dy, cache: {"x": cmp_backward(dy, cache, cfg)},
            {"x": distinct(rng, shape)}, rng, h,
        ))
    return worst


def check_conv2d(seed: int = 0, h: float = STEP) -> float:
    rng = Rng(seed)
    worst = 0.0
    for stride, pad in ((1, 1), (2, 0), (2, 1)):
        inputs = {
            "x": rng.uniform((2, 3, 5, 5), -1, 1),
            "w": rng.uniform((4, 3, 3, 3), -1, 1),
            "b": rng.uniform((4,), -1, 1),
        }

        def fwd(x, w, b):
            return ops.conv2d_forward(x, w, b, stride, pad)

        def bwd(dy, cache):
            dx, dw, db = ops.conv2d_backward(dy, cache)
            return {"x": dx, "w": dw, "b": db}

        worst = max(worst, _check(fwd, bwd, inputs, rng, h))
    return worst


def check_dense(seed: int = 0, h: float = STEP) -> float:
    rng = Rng(seed)
    inputs = {
        "x": rng.uniform((3, 2, 2, 2), -1, 1),
        "w": rng.uniform((5, 8), -1, 1),
        "b": rng.uniform((5,), -1, 1),
    }

    def bwd(dy, cache):
        dx, dw, db = ops.dense_backward(dy, cache)
        return {"x": dx, "w": dw, "b": db}

    return _check(ops.dense_forward, bwd, inputs, rng, h)


def check_batchnorm(seed: int = 0, h: float = STEP) -> float:
    rng = Rng(seed)
    worst = 0.0
    for shape, mode in (((6, 4), "train"), ((3, 2, 3, 3), "train"), ((4, 3, 2, 2), "eval")):
        C = shape[1]
        inputs = {
            "x": rng.uniform(shape, -2, 2),
            "gamma": rng.uniform((C,), 0.5, 1.5),
            "beta": rng.uniform((C,), -0.5, 0.5),
        }
        running_mean = rng.uniform((C,), -0.2, 0.2)
        running_var = rng.uniform((C,), 0.5, 1.5)

        def fwd(x, gamma, beta):
            # fresh running stats each call so train-mode updates cannot leak
            st = ops.BnState(ops.ParamTensor(gamma), ops.ParamTensor(beta),
                             running_mean.copy(), running_var.copy())
            return ops.batchnorm_forward(x, st, mode)

        def bwd(dy, cache):
            dx, dg, db = ops.batchnorm_backward(dy, cache)
            return {"x": dx, "gamma": dg, "beta": db}

        worst = max(worst, _check(fwd, bwd, inputs, rng, h))
    return worst


def check_elu(seed: int = 0, h: float = STEP) -> float:
    rng = Rng(seed)
    x = rng.uniform((4, 5), 0.05, 2.0) * np.where(rng.random((4, 5)) < 0.5, -1.0, 1.0)
    return _check(ops.elu_forward, lambda dy, cache: {"x": ops.elu_backward(dy, cache)}, {"x": x}, rng, h)


def check_maxpool(seed: int = 0, h: float = STEP) -> float:
    rng = Rng(seed)
    return _check(
        ops.maxpool2d_forward,
        lambda dy, cache: {"x": ops.maxpool2d_backward(dy, cache)},
        {"x": distinct(rng, (2, 3, 4, 6))},
        rng, h,
    )


def check_gap(seed: int = 0, h: float = STEP) -> float:
    rng = Rng(seed)
    return _check(
        ops.global_avg_pool_forward,
        lambda dy, cache: {"x": ops.global_avg_pool_backward(dy, cache)},
        {"x": rng.uniform((2, 3, 3, 4), -1, 1)},
        rng, h,
    )


def check_softmax(seed: int = 0, h: float = STEP) -> float:
    rng = Rng(seed)
    logits = rng.uniform((5, 7), -3, 3)
    labels = rng.integers(0, 7, size=5)
    _, grad = ops.softmax_cross_entropy(logits, labels)
    num = numerical_grad(lambda: ops.softmax_cross_entropy(logits, labels)[0], logits, h)
    return rel_error(grad, num)


CHECKS = {
    "cmp": check_cmp,
    "conv2d": check_conv2d,
    "dense": check_dense,
    "batchnorm": check_batchnorm,
    "elu": check_elu,
    "softmax": check_softmax,
    "maxpool": check_maxpool,
    "gap": check_gap,
}


def run_checks(names=None, seed: int = 0) -> dict:
    names = list(CHECKS) if names is None else names
    return {name: CHECKS[name](seed) for name in names}
