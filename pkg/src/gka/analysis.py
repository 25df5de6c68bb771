"""Attention-analysis data products: rollout, CLS/patch maps, bandwidth
tables, diagonal-masked raw matrices, layer-wise kernel evolution.

Everything here is a pure function of (capture, params, config); exports are
CSV (9 significant digits) plus min-max normalized PGM grayscale twins.
Rendering into figures is a separate component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GkaError, ParameterError

RESIDUAL_WEIGHT = 0.5
DEFAULT_DISCARD_RATIOS = (0.0, 0.5, 0.9)


@dataclass
class RolloutConfig:
    discard_ratios: tuple = DEFAULT_DISCARD_RATIOS
    residual_weight: float = RESIDUAL_WEIGHT

    def __post_init__(self):
        ratios = tuple(self.discard_ratios)
        if any(not (0.0 <= r < 1.0) for r in ratios):
            raise ParameterError(f"discard ratios must lie in [0, 1): {ratios}")
        if list(ratios) != sorted(ratios):
            raise ParameterError(f"discard ratios must be sorted: {ratios}")
        self.discard_ratios = ratios


def _grid_side(n_tokens):
    p = int(math.isqrt(n_tokens - 1))
    if p * p != n_tokens - 1:
        raise ParameterError(f"{n_tokens} tokens is not CLS + square patch grid")
    return p


def head_average(capture, layer):
    heads = capture.heads(layer)
    if not heads:
        raise GkaError(f"capture holds no matrices for layer {layer}")
    return np.mean([capture.weights(layer, h) for h in heads], axis=0)


def _residual_mix(avg, ratio, residual_weight):
    n = avg.shape[0]
    ahat = residual_weight * avg + (1.0 - residual_weight) * np.eye(n, dtype=avg.dtype)
    if ratio > 0.0:
        thr = np.quantile(ahat, ratio)  # global per-matrix quantile
        ahat = np.where(ahat < thr, 0.0, ahat)
    return ahat / ahat.sum(axis=1, keepdims=True)


def attention_rollout(capture, cfg=None):
    """Cumulative residual-mixed attention flow; returns {ratio: P x P grid}.

    Per layer: head-average, mix with identity at weight 0.5, optionally zero
    entries below the global discard quantile, row-renormalize; the running
    product is left-multiplied by each deeper layer. The CLS row over patch
    tokens is reshaped to the patch grid.
    """
    cfg = cfg or RolloutConfig()
    layers = capture.layers()
    if not layers:
        raise GkaError("empty capture")
    if layers != list(range(layers[0], layers[0] + len(layers))):
        raise GkaError(f"capture is missing layers: have {layers}")
    n = capture.weights(layers[0], capture.heads(layers[0])[0]).shape[0]
    p = _grid_side(n)
    out = {}
    for ratio in cfg.discard_ratios:
        rolled = None
        for layer in layers:
            ahat = _residual_mix(head_average(capture, layer), ratio, cfg.residual_weight)
            rolled = ahat if rolled is None else ahat @ rolled
        out[ratio] = rolled[0, 1:].reshape(p, p)
    return out


def cls_attention_map(capture, layer, head):
    """CLS-to-patch attention of one head, reshaped to the patch grid."""
    w = capture.weights(layer, head)
    p = _grid_side(w.shape[0])
    return w[0, 1:].reshape(p, p)


def patch_query_coords(p):
    """The four canonical query-patch grid coordinates."""
    return [(p // 4, p // 4), (p // 2, p // 2), (3 * p // 4, 3 * p // 4), (p // 4, 3 * p // 4)]


def patch_attention_maps(capture, layer):
    """Head-averaged attention of four canonical query patches over the grid.

    Returns (list of four P x P grids, list of four (row, col) coords).
    """
    avg = head_average(capture, layer)
    p = _grid_side(avg.shape[0])
    coords = patch_query_coords(p)
    grids = []
    for (r, c) in coords:
        q = 1 + r * p + c  # +1 skips the CLS token
        grids.append(avg[q, 1:].reshape(p, p))
    return grids, coords


def sigma_report(bandwidths):
    """Bandwidth table sigma = exp(log_sigma) as an [L, H] array."""
    return np.exp(np.asarray(bandwidths.log_sigma, dtype=np.float64))


def subsample_indices(n, max_tokens):
    """Uniform index subsampling: round(linspace) over the full range."""
    if n <= max_tokens:
        return np.arange(n)
    return np.round(np.linspace(0, n - 1, max_tokens)).astype(np.int64)


def raw_matrix_export(capture, layer, head, mask_diagonal=True, max_tokens=50):
    """One head's mixing matrix, optionally diagonal-zeroed and subsampled.

    Returns (matrix, kept_indices). Zeroing the diagonal rescales the value
    range to cross-token structure, which self-affinity otherwise dominates.
    """
    w = np.array(capture.weights(layer, head))
    if mask_diagonal:
        np.fill_diagonal(w, 0.0)
    idx = subsample_indices(w.shape[0], max_tokens)
    return w[np.ix_(idx, idx)], idx


def kernel_evolution_export(capture):
    """Per-layer triple for the depth-evolution figure: the head-averaged
    full matrix plus the head-averaged CLS grid twice (heatmap and overlay
    columns share the same data; blending happens at render time)."""
    layers = capture.layers()
    if not layers:
        raise GkaError("empty capture")
    rows = []
    for layer in layers:
        avg = head_average(capture, layer)
        p = _grid_side(avg.shape[0])
        cls_grid = avg[0, 1:].reshape(p, p)
        rows.append({"layer": layer, "full": avg, "cls": cls_grid, "cls_overlay": cls_grid})
    return rows


# ---------------------------------------------------------------------------
# File exports

CSV_FMT = "{:.9g}"


def write_csv_matrix(path, mat):
    mat = np.asarray(mat)
    if mat.ndim == 1:
        mat = mat[None, :]
    with open(path, "w") as f:
        for row in mat:
            f.write(",".join(CSV_FMT.format(float(v)) for v in row) + "\n")


def read_csv_matrix(path):
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    return np.asarray(rows)


def write_pgm(path, mat):
    """Min-max normalized 8-bit grayscale in binary PGM (P5)."""
    mat = np.asarray(mat, dtype=np.float64)
    lo, hi = float(mat.min()), float(mat.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.round((mat - lo) * scale).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def _write_pair(outdir, stem, mat):
    write_csv_matrix(outdir / f"{stem}.csv", mat)
    write_pgm(outdir / f"{stem}.pgm", mat)


def export_run(outdir, capture, bandwidths, rollout_cfg=None, max_tokens=50):
    """Write the full analysis tree for one captured forward pass.

    Layout: rollout_r{ratio}.csv, cls_L{l}_H{h}.csv, patch_L{l}_q{k}.csv,
    sigma.csv (+ sigma_series.csv), raw_L{l}_H{h}.csv, evo_L{l}_{full,cls}.csv,
    each with a .pgm grayscale twin. Returns the list of files written.
    """
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = rollout_cfg or RolloutConfig()
    written = []

    for ratio, grid in attention_rollout(capture, cfg).items():
        stem = f"rollout_r{ratio:g}"
        _write_pair(outdir, stem, grid)
        written += [f"{stem}.csv", f"{stem}.pgm"]

    layers = capture.layers()
    for layer in layers:
        for head in capture.heads(layer):
            stem = f"cls_L{layer}_H{head}"
            _write_pair(outdir, stem, cls_attention_map(capture, layer, head))
            written += [f"{stem}.csv", f"{stem}.pgm"]
            raw, _ = raw_matrix_export(capture, layer, head, max_tokens=max_tokens)
            stem = f"raw_L{layer}_H{head}"
            _write_pair(outdir, stem, raw)
            written += [f"{stem}.csv", f"{stem}.pgm"]
        grids, _ = patch_attention_maps(capture, layer)
        for k, grid in enumerate(grids):
            stem = f"patch_L{layer}_q{k}"
            _write_pair(outdir, stem, grid)
            written += [f"{stem}.csv", f"{stem}.pgm"]

    sig = sigma_report(bandwidths)
    _write_pair(outdir, "sigma", sig)
    written += ["sigma.csv", "sigma.pgm"]
    with open(outdir / "sigma_series.csv", "w") as f:
        f.write("layer," + ",".join(f"sigma_H{h}" for h in range(sig.shape[1])) + "\n")
        for layer in range(sig.shape[0]):
            f.write(str(layer) + "," + ",".join(CSV_FMT.format(v) for v in sig[layer]) + "\n")
    written.append("sigma_series.csv")

    for row in kernel_evolution_export(capture):
        stem = f"evo_L{row['layer']}_full"
        _write_pair(outdir, stem, row["full"])
        written += [f"{stem}.csv", f"{stem}.pgm"]
        stem = f"evo_L{row['layer']}_cls"
        _write_pair(outdir, stem, row["cls"])
        written += [f"{stem}.csv", f"{stem}.pgm"]
    return written
