"""Gaussian kernel attention: RBF affinities on per-head features, masked
row normalization, diffusion, output projection, and the analytic backward.

Shapes follow the block convention: x is [B, N, D] with D = H * d and head h
occupying columns [h*d, (h+1)*d).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateRowError, ParameterError, ShapeError

# Guard for the unit-norm feature preprocessing; negligible next to |v|~1.
NORM_EPS = 1e-12

# Eq.(4)-style denominator guard, per working precision.
KERNEL_EPS_SINGLE = 1e-6
KERNEL_EPS_DOUBLE = 1e-12

ROPE_BASE_DEFAULT = 10000.0

MASK_KINDS = ("none", "causal", "causal_window")


@dataclass
class MaskSpec:
    """Declarative attention mask.

    kind 'none' allows everything, 'causal' allows j <= i, 'causal_window'
    allows i - W < j <= i. layer_pattern (over {S, L}) cycles across layers:
    'S' resolves to causal_window, 'L' to full causal.
    """

    kind: str = "none"
    window_size: int | None = None
    layer_pattern: str | None = None

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ParameterError(f"mask kind {self.kind!r} not in {MASK_KINDS}")
        if self.kind == "causal_window":
            if self.window_size is None or self.window_size < 1:
                raise ParameterError("causal_window requires window_size >= 1")
        if self.layer_pattern:
            if set(self.layer_pattern) - {"S", "L"}:
                raise ParameterError(f"layer_pattern {self.layer_pattern!r} must use only S/L")
            if "S" in self.layer_pattern and (self.window_size is None or self.window_size < 1):
                raise ParameterError("layer_pattern with 'S' requires window_size >= 1")
            if self.kind == "none":
                raise ParameterError("layer_pattern is meaningless with kind 'none'")

    def for_layer(self, layer_index):
        """Resolve the effective single-layer mask at layer_index."""
        if self.layer_pattern:
            ch = self.layer_pattern[layer_index % len(self.layer_pattern)]
            if ch == "L":
                return MaskSpec("causal")
            return MaskSpec("causal_window", window_size=self.window_size)
        return MaskSpec(self.kind, window_size=self.window_size)

    def allowed_matrix(self, n, layer_index=0):
        """Boolean [n, n] allowed matrix for this layer, or None when unmasked."""
        eff = self.for_layer(layer_index)
        if eff.kind == "none":
            return None
        return _allowed_matrix_cached(eff.kind, eff.window_size or 0, n)


@lru_cache(maxsize=128)
def _allowed_matrix_cached(kind, window, n):
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    if kind == "causal":
        allowed = j <= i
    else:  # causal_window: i - W < j <= i
        allowed = (j <= i) & (j > i - window)
    allowed.setflags(write=False)
    return allowed


@dataclass
class BandwidthParams:
    """Per-layer, per-head log-bandwidths; sigma = exp(log_sigma)."""

    log_sigma: np.ndarray  # [L, H]

    def sigma(self, layer, head):
        return float(np.exp(self.log_sigma[layer, head]))

    def sigma_table(self):
        return np.exp(self.log_sigma)


@dataclass
class GkaLayerParams:
    """One attention layer: H log-bandwidths, output projection, kernel guard.

    use_rope / unit_norm enable the causal-mode feature preprocessing (rotary
    transform then per-token unit normalization) applied to the kernel
    features only; values stay raw.
    """

    log_sigma: np.ndarray  # [H]
    w_o: np.ndarray  # [D, D]
    b_o: np.ndarray  # [D]
    epsilon: float = KERNEL_EPS_SINGLE
    use_rope: bool = False
    unit_norm: bool = False
    rope_base: float = ROPE_BASE_DEFAULT

    def __post_init__(self):
        self.log_sigma = np.asarray(self.log_sigma)
        self.w_o = np.asarray(self.w_o)
        self.b_o = np.asarray(self.b_o)
        if self.epsilon <= 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        d_model = self.w_o.shape[0]
        if self.w_o.shape != (d_model, d_model) or self.b_o.shape != (d_model,):
            raise ShapeError(f"output projection shapes {self.w_o.shape}, {self.b_o.shape}")
        if d_model % self.num_heads != 0:
            raise ShapeError(f"width {d_model} not divisible by {self.num_heads} heads")

    @property
    def num_heads(self):
        return int(self.log_sigma.shape[0])

    def sigma(self):
        return np.exp(self.log_sigma)


class AttentionCapture:
    """Records per-(layer, head) row-stochastic matrices from one batch item."""

    def __init__(self, batch_index=0, store_kernel=False):
        self.batch_index = batch_index
        self.store_kernel = store_kernel
        self._weights = {}
        self._kernels = {}

    def record(self, layer, head, weights, kernel=None):
        self._weights[(layer, head)] = weights
        if self.store_kernel and kernel is not None:
            self._kernels[(layer, head)] = kernel

    def weights(self, layer, head):
        return self._weights[(layer, head)]

    def kernel(self, layer, head):
        return self._kernels[(layer, head)]

    def layers(self):
        return sorted({layer for layer, _ in self._weights})

    def heads(self, layer):
        return sorted(h for (l, h) in self._weights if l == layer)

    def __contains__(self, key):
        return key in self._weights

    def __len__(self):
        return len(self._weights)


def pairwise_sqdist(x):
    """Squared Euclidean distances D_ij = |x_i - x_j|^2 for x [..., N, d].

    Uses the Gram expansion |a|^2 + |b|^2 - 2 a.b, clamps tiny negative
    cancellation residue to 0, and pins the diagonal to exactly 0.
    """
    x = np.asarray(x)
    norms = (x * x).sum(axis=-1)  # [..., N]
    gram = np.matmul(x, np.swapaxes(x, -1, -2))  # [..., N, N]
    d = norms[..., :, None] + norms[..., None, :] - 2.0 * gram
    np.maximum(d, 0.0, out=d)
    n = x.shape[-2]
    idx = np.arange(n)
    d[..., idx, idx] = 0.0
    return d


def gka_affinity(x_head, sigma):
    """Gaussian RBF affinity K_ij = exp(-|x_i - x_j|^2 / (2 sigma^2))."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    d = pairwise_sqdist(x_head)
    return np.exp(-d / (2.0 * sigma * sigma))


def masked_row_normalize(k, mask=None, epsilon=KERNEL_EPS_SINGLE):
    """Convert nonnegative affinities into a (masked) row-stochastic matrix.

    mask may be a MaskSpec (already resolved for this layer), a boolean
    matrix, or None for unmasked. Rows with zero allowed entries raise
    DegenerateRowError.
    """
    k = np.asarray(k)
    n = k.shape[-1]
    if isinstance(mask, MaskSpec):
        allowed = mask.allowed_matrix(n)
    else:
        allowed = mask
    if allowed is None:
        kbar = k
    else:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != (n, n):
            raise ShapeError(f"mask shape {allowed.shape} does not match kernel rows {k.shape}")
        if not allowed.any(axis=1).all():
            raise DegenerateRowError("mask leaves a row with zero allowed entries")
        kbar = k * allowed
    s = kbar.sum(axis=-1, keepdims=True)
    return kbar / (s + epsilon)


def rope_apply(x_head, base=ROPE_BASE_DEFAULT):
    """Rotary position transform on consecutive dimension pairs of [..., N, d].

    Position runs along the second-to-last axis; pair m rotates by
    pos * base^(-2m/d). Norm-preserving; position 0 is unchanged.
    """
    x = np.asarray(x_head)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ParameterError(f"rope requires even head dim, got {d}")
    n = x.shape[-2]
    return _rope_rotate(x, _rope_angles(n, d, base, x.dtype))


def rope_invert(x_head, base=ROPE_BASE_DEFAULT):
    """Inverse rotary transform (used by the backward pass)."""
    x = np.asarray(x_head)
    n, d = x.shape[-2], x.shape[-1]
    return _rope_rotate(x, -_rope_angles(n, d, base, x.dtype))


def _rope_angles(n, d, base, dtype):
    return _rope_angles_at(np.arange(n), d, base, dtype)


def _rope_angles_at(positions, d, base, dtype):
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]  # [N, d/2]
    return ang.astype(dtype, copy=False)


def _rope_rotate(x, ang):
    cos, sin = np.cos(ang), np.sin(ang)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def unit_normalize_rows(x):
    """Scale each trailing-axis vector to unit Euclidean norm."""
    x = np.asarray(x)
    r = np.sqrt((x * x).sum(axis=-1, keepdims=True) + NORM_EPS)
    return x / r


def _split_heads(x, num_heads):
    b, n, d_model = x.shape
    if d_model % num_heads != 0:
        raise ShapeError(f"width {d_model} not divisible by {num_heads} heads")
    d = d_model // num_heads
    return x.reshape(b, n, num_heads, d).transpose(0, 2, 1, 3)  # [B, H, N, d]


def _merge_heads(xh):
    b, h, n, d = xh.shape
    return xh.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def _kernel_features(xh, params):
    """Apply the optional rope + unit-norm preprocessing to [B, H, N, d]."""
    feats = xh
    if params.use_rope:
        feats = rope_apply(feats, params.rope_base)
    if params.unit_norm:
        feats = unit_normalize_rows(feats)
    return feats


def _gka_internals(x, params, mask, layer_index):
    """Shared forward computation; returns every intermediate."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [B, N, D] input, got shape {x.shape}")
    b, n, d_model = x.shape
    h = params.num_heads
    if params.w_o.shape[0] != d_model:
        raise ShapeError(f"input width {d_model} vs projection {params.w_o.shape}")
    xh = _split_heads(x, h)  # [B, H, N, d]
    feats = _kernel_features(xh, params)
    dist = pairwise_sqdist(feats)  # [B, H, N, N]
    sigma = np.exp(params.log_sigma).astype(x.dtype)  # [H]
    inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma)
    kern = np.exp(-dist * inv_two_sigma2[None, :, None, None])
    allowed = mask.allowed_matrix(n, layer_index) if mask is not None else None
    kbar = kern if allowed is None else kern * allowed
    s = kbar.sum(axis=-1)  # [B, H, N]
    w = kbar / (s + params.epsilon)[..., None]
    yh = np.matmul(w, xh)  # values are the raw per-head features
    ycat = _merge_heads(yh)
    out = np.matmul(ycat, params.w_o) + params.b_o
    return {
        "x": x, "xh": xh, "feats": feats, "dist": dist, "sigma": sigma,
        "kern": kern, "allowed": allowed, "s": s, "w": w, "ycat": ycat, "out": out,
    }


def gka_forward(x, params, mask=None, layer_index=0, capture=None):
    """Gaussian kernel attention layer on x [B, N, D].

    Per head: preprocess features (rope/unit-norm when enabled), Gaussian
    affinities, masked row normalization, diffusion over the raw head
    features, then concat and output projection. The caller is responsible
    for pre-attention normalization and the residual.
    """
    it = _gka_internals(x, params, mask, layer_index)
    if capture is not None:
        bi = capture.batch_index
        for head in range(params.num_heads):
            kern = it["kern"][bi, head].copy() if capture.store_kernel else None
            capture.record(layer_index, head, it["w"][bi, head].copy(), kern)
    return it["out"]


def gka_backward(x, params, mask, grad_out, layer_index=0):
    """Analytic gradients of gka_forward.

    Returns (grad_x, grad_log_sigma, grad_w_o, grad_b_o). Tokens contribute
    through both the kernel path (via preprocessed features) and the value
    path; both are accumulated into grad_x.
    """
    it = _gka_internals(x, params, mask, layer_index)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != it["out"].shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} vs output {it['out'].shape}")
    xh, feats, dist = it["xh"], it["feats"], it["dist"]
    kern, allowed, s, w = it["kern"], it["allowed"], it["s"], it["w"]
    sigma = it["sigma"]
    h = params.num_heads

    grad_b_o = grad_out.sum(axis=(0, 1))
    grad_w_o = np.einsum("bnd,bne->de", it["ycat"], grad_out)
    gcat = np.matmul(grad_out, params.w_o.T)
    g = _split_heads(gcat, h)  # [B, H, N, d]

    # Value path: y = W x.
    grad_xh = np.matmul(np.swapaxes(w, -1, -2), g)

    # Mixing-matrix path: quotient rule over the allowed set.
    gw = np.matmul(g, np.swapaxes(xh, -1, -2))  # [B, H, N, N]
    r = (gw * w).sum(axis=-1)  # [B, H, N]
    gkbar = (gw - r[..., None]) / (s + params.epsilon)[..., None]
    gk = gkbar if allowed is None else gkbar * allowed

    inv_sigma2 = 1.0 / (sigma * sigma)
    grad_log_sigma = (gk * kern * dist).sum(axis=(0, 2, 3)) * inv_sigma2

    gd = gk * kern * (-0.5 * inv_sigma2[None, :, None, None])
    gs = gd + np.swapaxes(gd, -1, -2)
    grad_feats = 2.0 * (gs.sum(axis=-1)[..., None] * feats - np.matmul(gs, feats))

    # Undo the feature preprocessing (reverse order of application).
    if params.unit_norm:
        pre = rope_apply(xh, params.rope_base) if params.use_rope else xh
        r2 = np.sqrt((pre * pre).sum(axis=-1, keepdims=True) + NORM_EPS)
        u = pre / r2
        grad_feats = (grad_feats - u * (u * grad_feats).sum(axis=-1, keepdims=True)) / r2
    if params.use_rope:
        grad_feats = rope_invert(grad_feats, params.rope_base)
    grad_xh += grad_feats

    grad_x = _merge_heads(grad_xh)
    return grad_x, grad_log_sigma.astype(params.log_sigma.dtype), grad_w_o, grad_b_o
