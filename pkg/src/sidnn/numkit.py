"""Dense float64 numerics with hand-written forward and backward passes.

Every tensor is a C-contiguous float64 ndarray with an explicit shape; there
is no broadcasting and no autodiff graph. Each primitive ships an analytic
backward, and ``grad_check`` validates any (forward, vjp) pair against
central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, DimensionError, ParameterError

Array = np.ndarray


def as_f64(values) -> Array:
    """Materialize anything array-like as a C-contiguous float64 array."""
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64))


def check_finite(name: str, a: Array) -> Array:
    """Explicit NaN/Inf gate; non-finite values never fail silently."""
    if not np.all(np.isfinite(a)):
        raise DataError(f"non-finite values in '{name}'")
    return a


@dataclass
class GradPair:
    """A value array paired with a gradient of identical shape."""

    value: Array
    grad: Array

    def __post_init__(self) -> None:
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------


def affine(x: Array, w: Array, b: Array) -> Array:
    """out[n,o] = sum_i x[n,i]*w[i,o] + b[o]; x (N,I), w (I,O), b (O,)."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"affine expects 2-d x, 2-d w, 1-d b; got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"affine shape mismatch: x {x.shape} vs w {w.shape}")
    return x @ w + b


def affine_backward(g: Array, x: Array, w: Array) -> tuple[Array, Array, Array]:
    """Returns (dx, dw, db) for out = x @ w + b given upstream g (N,O)."""
    return g @ w.T, x.T @ g, g.sum(axis=0)


# ---------------------------------------------------------------------------
# dilated causal convolution
# ---------------------------------------------------------------------------


def causal_conv1d(x: Array, k: Array, dilation: int) -> Array:
    """Left-zero-padded dilated convolution over the last axis.

    x (B, C_in, T), k (C_out, C_in, K). Output at time t reads inputs at
    t - dilation*(K-1-j) for tap j, so it depends on times <= t only.
    """
    if dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {dilation}")
    if x.ndim != 3 or k.ndim != 3:
        raise DimensionError(f"conv expects 3-d x and k; got {x.shape}, {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise DimensionError(
            f"conv channel mismatch: x {x.shape} vs kernel {k.shape}"
        )
    if k.shape[2] < 1:
        raise ParameterError("kernel must have at least one tap")
    B, _, T = x.shape
    c_out, _, K = k.shape
    out = np.zeros((B, c_out, T))
    for j in range(K):
        shift = dilation * (K - 1 - j)
        if shift >= T:
            continue
        if shift == 0:
            out += np.matmul(k[:, :, j], x)
        else:
            out[:, :, shift:] += np.matmul(k[:, :, j], x[:, :, : T - shift])
    return out


def causal_conv1d_backward(
    g: Array, x: Array, k: Array, dilation: int
) -> tuple[Array, Array]:
    """Returns (dx, dk) for causal_conv1d given upstream g (B, C_out, T)."""
    T = x.shape[2]
    K = k.shape[2]
    dx = np.zeros_like(x)
    dk = np.zeros_like(k)
    for j in range(K):
        shift = dilation * (K - 1 - j)
        if shift >= T:
            dk[:, :, j] = 0.0
            continue
        g_part = g[:, :, shift:] if shift else g
        x_part = x[:, :, : T - shift] if shift else x
        dk[:, :, j] = np.matmul(g_part, x_part.transpose(0, 2, 1)).sum(axis=0)
        if shift == 0:
            dx += np.matmul(k[:, :, j].T, g)
        else:
            dx[:, :, : T - shift] += np.matmul(k[:, :, j].T, g_part)
    return dx, dk


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------


def sigmoid(x: Array) -> Array:
    """Numerically stable logistic; sigmoid(0) == 0.5."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(g: Array, out: Array) -> Array:
    return g * out * (1.0 - out)


def tanh(x: Array) -> Array:
    return np.tanh(x)


def tanh_backward(g: Array, out: Array) -> Array:
    return g * (1.0 - out * out)


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(g: Array, x: Array) -> Array:
    return g * (x > 0.0)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[..., tuple[Array, Callable[[Array], Sequence[Array]]]],
    inputs: Sequence[Array],
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst-case relative error between analytic and central-difference grads.

    ``f(*inputs)`` must return ``(output, vjp)`` where ``vjp(g)`` yields one
    gradient per input. The scalar probe is L = sum(output * g) for a fixed
    random cotangent g; the relative error of element a vs numeric n is
    |a - n| / max(|a|, |n|, 1), so near-zero gradients are compared at an
    absolute scale of eps per unit.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    if rng is None:
        rng = np.random.default_rng(0)
    inputs = [as_f64(x) for x in inputs]
    out, vjp = f(*inputs)
    g = rng.standard_normal(out.shape)
    analytic = vjp(g)
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        flat = x.reshape(-1)
        ga_flat = np.asarray(ga).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            l_plus = float(np.sum(f(*inputs)[0] * g))
            flat[i] = orig - eps
            l_minus = float(np.sum(f(*inputs)[0] * g))
            flat[i] = orig
            numeric = (l_plus - l_minus) / (2.0 * eps)
            a = float(ga_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst
