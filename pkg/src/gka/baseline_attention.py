"""Reference operators: standard multi-head dot-product attention and the
value-less (VLT) ablation, with matching forward/backward contracts.

Masking is additive (-1e9 on disallowed logits before softmax), mirroring how
dot-product attention is usually stated; the kernel module instead masks
multiplicatively before normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .kernel_attention import _merge_heads, _split_heads
from .numerics import softmax_rows

MASK_FILL = -1e9

VARIANTS = ("standard", "vlt")


@dataclass
class MhaLayerParams:
    """Projection weights for one attention layer.

    variant 'vlt' drops w_v/b_v entirely; values are the raw per-head
    features.
    """

    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    num_heads: int
    w_v: np.ndarray | None = None
    b_v: np.ndarray | None = None
    variant: str = "standard"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant {self.variant!r} not in {VARIANTS}")
        if self.variant == "standard" and (self.w_v is None or self.b_v is None):
            raise ParameterError("standard variant requires w_v/b_v")
        if self.variant == "vlt" and self.w_v is not None:
            raise ParameterError("vlt variant must not carry w_v")
        d = self.w_q.shape[0]
        if d % self.num_heads != 0:
            raise ShapeError(f"width {d} not divisible by {self.num_heads} heads")


def _attn_internals(x, params, mask, layer_index):
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [B, N, D] input, got shape {x.shape}")
    b, n, d_model = x.shape
    if params.w_q.shape != (d_model, d_model):
        raise ShapeError(f"input width {d_model} vs w_q {params.w_q.shape}")
    h = params.num_heads
    d = d_model // h
    q = _split_heads(np.matmul(x, params.w_q) + params.b_q, h)
    k = _split_heads(np.matmul(x, params.w_k) + params.b_k, h)
    if params.variant == "vlt":
        v = _split_heads(x, h)
    else:
        v = _split_heads(np.matmul(x, params.w_v) + params.b_v, h)
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(np.asarray(d, dtype=x.dtype))
    allowed = mask.allowed_matrix(n, layer_index) if mask is not None else None
    if allowed is not None:
        logits = np.where(allowed, logits, np.asarray(MASK_FILL, dtype=x.dtype))
    p = softmax_rows(logits)
    yh = np.matmul(p, v)
    ycat = _merge_heads(yh)
    out = np.matmul(ycat, params.w_o) + params.b_o
    return {"x": x, "q": q, "k": k, "v": v, "p": p, "allowed": allowed, "ycat": ycat, "out": out, "d": d}


def mha_forward(x, params, mask=None, layer_index=0):
    """Standard (or value-less) multi-head attention on x [B, N, D]."""
    return _attn_internals(x, params, mask, layer_index)["out"]


def mha_backward(x, params, mask, grad_out, layer_index=0):
    """Analytic gradients of mha_forward.

    Returns a dict with keys x, w_q, b_q, w_k, b_k, w_o, b_o and, for the
    standard variant only, w_v/b_v.
    """
    it = _attn_internals(x, params, mask, layer_index)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != it["out"].shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} vs output {it['out'].shape}")
    x, q, k, v, p = it["x"], it["q"], it["k"], it["v"], it["p"]
    h = params.num_heads
    scale = 1.0 / np.sqrt(np.asarray(it["d"], dtype=x.dtype))

    grads = {}
    grads["b_o"] = grad_out.sum(axis=(0, 1))
    grads["w_o"] = np.einsum("bnd,bne->de", it["ycat"], grad_out)
    g = _split_heads(np.matmul(grad_out, params.w_o.T), h)

    dp = np.matmul(g, np.swapaxes(v, -1, -2))
    dv = np.matmul(np.swapaxes(p, -1, -2), g)
    dlogits = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    dq = np.matmul(dlogits, k) * scale
    dk = np.matmul(np.swapaxes(dlogits, -1, -2), q) * scale

    dq_flat, dk_flat, dv_flat = (_merge_heads(t) for t in (dq, dk, dv))
    grads["w_q"] = np.einsum("bnd,bne->de", x, dq_flat)
    grads["b_q"] = dq_flat.sum(axis=(0, 1))
    grads["w_k"] = np.einsum("bnd,bne->de", x, dk_flat)
    grads["b_k"] = dk_flat.sum(axis=(0, 1))
    grad_x = np.matmul(dq_flat, params.w_q.T) + np.matmul(dk_flat, params.w_k.T)
    if params.variant == "vlt":
        grad_x = grad_x + dv_flat
    else:
        grads["w_v"] = np.einsum("bnd,bne->de", x, dv_flat)
        grads["b_v"] = dv_flat.sum(axis=(0, 1))
        grad_x = grad_x + np.matmul(dv_flat, params.w_v.T)
    grads["x"] = grad_x
    return grads
