"""Tiled, IO-aware GKA forward pass that never materializes the N x N
affinity matrix.

Per query tile we stream key tiles in ascending order, accumulating a per-row
numerator vector and denominator scalar. No max-shift pass is needed: every
kernel value lies in (0, 1] and the always-allowed self term keeps the
denominator >= 1, so a single accumulation pass is numerically safe (a
GKA-specific simplification over online-softmax). Numerator and denominator
accumulate in float64 even in single-precision mode.

Sliding-window masks skip out-of-window key tiles entirely, so per-row work
is O(W) rather than O(N).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .kernel_attention import (
    _merge_heads,
    _rope_angles_at,
    _rope_rotate,
    _split_heads,
    unit_normalize_rows,
)


@dataclass
class TileConfig:
    tile_rows: int = 64
    tile_cols: int = 64
    track_workspace: bool = True

    def __post_init__(self):
        if self.tile_rows < 1 or self.tile_cols < 1:
            raise ParameterError(f"tile sizes must be >= 1, got {self.tile_rows}x{self.tile_cols}")


@dataclass
class WorkspaceStats:
    """Transient-allocation accounting for one streaming call.

    peak_transient_floats counts array elements in the per-(batch, head)
    worker's tile buffers. With tiles >= head dim it stays within
    4 * (tile_rows*tile_cols + tile_rows*d) and is independent of N.
    """

    peak_transient_floats: int = 0
    key_tiles_visited: int = 0
    query_tiles: int = 0
    max_key_tiles_per_query_tile: int = 0
    visited_per_query_tile: list = field(default_factory=list)

    def note_query_tile(self, visited, transient_floats):
        self.query_tiles += 1
        self.key_tiles_visited += visited
        self.max_key_tiles_per_query_tile = max(self.max_key_tiles_per_query_tile, visited)
        self.visited_per_query_tile.append(visited)
        self.peak_transient_floats = max(self.peak_transient_floats, transient_floats)


def gka_forward_streaming(x, params, mask=None, layer_index=0, tiles=None):
    """Tiled GKA forward; returns (output, WorkspaceStats).

    Matches gka_forward up to floating-point reassociation across tiles.
    Key-tile accumulation order is fixed (ascending) for determinism.
    """
    if tiles is None:
        tiles = TileConfig()
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [B, N, D] input, got shape {x.shape}")
    b, n, d_model = x.shape
    h = params.num_heads
    d = d_model // h
    tr, tc = tiles.tile_rows, tiles.tile_cols

    eff = mask.for_layer(layer_index) if mask is not None else None
    kind = eff.kind if eff is not None else "none"
    window = eff.window_size if kind == "causal_window" else 0

    xh = _split_heads(x, h)  # [B, H, N, d]
    sigma = np.exp(params.log_sigma)
    inv_two_sigma2 = (1.0 / (2.0 * sigma * sigma)).astype(np.float64)

    out_heads = np.empty((b, h, n, d), dtype=x.dtype)
    stats = WorkspaceStats()

    for bi in range(b):
        for hi in range(h):
            xrow = xh[bi, hi]  # [N, d]
            scale = inv_two_sigma2[hi]
            for i0 in range(0, n, tr):
                i1 = min(i0 + tr, n)
                rows = i1 - i0
                q_feats = _tile_features(xrow, i0, i1, params)
                q_norms = (q_feats * q_feats).sum(axis=1)
                num = np.zeros((rows, d), dtype=np.float64)
                den = np.zeros(rows, dtype=np.float64)
                base = q_feats.size + q_norms.size + num.size + den.size
                peak = base
                visited = 0
                j_lo, j_hi = _key_range(kind, window, i0, i1, n)
                for j0 in range((j_lo // tc) * tc, j_hi, tc):
                    j1 = min(j0 + tc, j_hi)
                    if j1 <= j0:
                        continue
                    visited += 1
                    k_feats = _tile_features(xrow, j0, j1, params)
                    k_norms = (k_feats * k_feats).sum(axis=1)
                    # Gram -> squared distance -> kernel, reusing one buffer.
                    tile = np.matmul(q_feats, k_feats.T).astype(np.float64)
                    tile *= -2.0
                    tile += q_norms[:, None]
                    tile += k_norms[None, :]
                    np.maximum(tile, 0.0, out=tile)
                    _zero_tile_diagonal(tile, i0, j0)
                    tile *= -scale
                    np.exp(tile, out=tile)
                    transient = base + k_feats.size + k_norms.size + tile.size
                    allowed = _tile_allowed(kind, window, i0, i1, j0, j1)
                    if allowed is not None:
                        tile *= allowed
                        transient += allowed.size
                    den += tile.sum(axis=1)
                    num += np.matmul(tile, xrow[j0:j1].astype(np.float64))
                    if tiles.track_workspace and transient > peak:
                        peak = transient
                out_heads[bi, hi, i0:i1] = (num / (den + params.epsilon)[:, None]).astype(x.dtype)
                stats.note_query_tile(visited, peak)

    ycat = _merge_heads(out_heads)
    out = np.matmul(ycat, params.w_o) + params.b_o
    return out, stats


def _key_range(kind, window, i0, i1, n):
    """Half-open key-column range relevant to query rows [i0, i1)."""
    if kind == "none":
        return 0, n
    if kind == "causal":
        return 0, i1
    return max(0, i0 - window + 1), i1


def _tile_features(xrow, lo, hi, params):
    """Kernel features for token rows [lo, hi), computed tile-locally."""
    sub = xrow[lo:hi]
    if not (params.use_rope or params.unit_norm):
        return sub
    feats = sub
    if params.use_rope:
        ang = _rope_angles_at(np.arange(lo, hi), sub.shape[-1], params.rope_base, sub.dtype)
        feats = _rope_rotate(feats, ang)
    if params.unit_norm:
        feats = unit_normalize_rows(feats)
    return feats


def _zero_tile_diagonal(tile, i0, j0):
    """Pin exact zeros where global row index equals global column index."""
    rows, cols = tile.shape
    lo = max(i0, j0)
    hi = min(i0 + rows, j0 + cols)
    if lo < hi:
        idx = np.arange(lo, hi)
        tile[idx - i0, idx - j0] = 0.0


def _tile_allowed(kind, window, i0, i1, j0, j1):
    """Boolean tile mask, or None when the whole tile is allowed."""
    if kind == "none":
        return None
    if kind == "causal":
        if j1 - 1 <= i0:
            return None
        i = np.arange(i0, i1)[:, None]
        j = np.arange(j0, j1)[None, :]
        return j <= i
    if j1 - 1 <= i0 and j0 > i1 - 1 - window:
        return None
    i = np.arange(i0, i1)[:, None]
    j = np.arange(j0, j1)[None, :]
    return (j <= i) & (j > i - window)
