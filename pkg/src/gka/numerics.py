"""Dense-tensor substrate: matmul, reductions, layer norm, softmax, elementwise ops.

Arrays are plain numpy ndarrays in row-major layout. float32 is the working
precision, float64 the verification precision; every op preserves the input
dtype. Reduction order is numpy's fixed order, so repeated runs are
bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

DTYPES = {"single": np.float32, "double": np.float64}

LN_EPS_DEFAULT = 1e-5


def resolve_dtype(precision):
    """Map a precision tag ('single' | 'double') to a numpy dtype."""
    if precision not in DTYPES:
        raise ParameterError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}")
    return DTYPES[precision]


def matmul(a, b):
    """Matrix product a @ b for [..., M, K] x [..., K, P].

    Inner extents must agree; leading axes broadcast. Summation order over k
    is fixed by the backend, so repeated calls are bit-identical.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def layer_norm(x, gamma, beta, eps=LN_EPS_DEFAULT):
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shape mismatch: x last axis {d}, gamma {gamma.shape}, beta {beta.shape}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return (xhat * gamma + beta).astype(x.dtype, copy=False)


def softmax_rows(x):
    """Row-wise (last axis) softmax with max-shift for stability."""
    x = np.asarray(x)
    if np.isnan(x).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x):
    """GELU activation, tanh approximation (GPT-2 convention)."""
    x = np.asarray(x)
    c = np.sqrt(np.asarray(2.0 / np.pi, dtype=x.dtype))
    x2 = x * x
    inner = c * (x + 0.044715 * x2 * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x):
    """Elementwise derivative of the tanh-approximated GELU."""
    x = np.asarray(x)
    c = np.sqrt(np.asarray(2.0 / np.pi, dtype=x.dtype))
    x2 = x * x
    inner = c * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    dinner = c * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
