"""Turns the engine's CSV export tree into attention-analysis figures.

Reads only the documented export files (rollout_r*.csv, cls_L*_H*.csv,
patch_L*_q*.csv, sigma.csv, sigma_series.csv, raw_L*_H*.csv, evo_L*_*.csv,
input.pgm); never touches checkpoints or model code. Rendering is read-only
and deterministic given inputs and dpi.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

OVERLAY_ALPHA = 0.6
HEAT_CMAP = "inferno"
SIGMA_CMAP = "YlOrRd"
MATRIX_CMAP = "viridis"

KINDS = ("rollout", "sigma", "cls", "patch", "raw", "evolution")


class MissingExportError(FileNotFoundError):
    pass


@dataclass
class FigureJob:
    indir: str
    kind: str
    out_path: str
    dpi: int = 150
    image: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; valid: {KINDS}")


def read_csv_matrix(path):
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    return np.asarray(rows)


def read_pgm(path):
    """Binary (P5) grayscale reader for the engine's input.pgm."""
    blob = Path(path).read_bytes()
    header = blob.split(b"\n", 3)
    if header[0] != b"P5":
        raise ValueError(f"{path}: expected binary PGM (P5)")
    w, h = (int(v) for v in header[1].split())
    pix = np.frombuffer(header[3], dtype=np.uint8, count=w * h)
    return pix.reshape(h, w).astype(np.float64) / 255.0


def _require(indir, pattern):
    files = sorted(Path(indir).glob(pattern))
    if not files:
        raise MissingExportError(f"no {pattern} under {indir}")
    return files


def _indexed(indir, pattern, regex):
    out = {}
    for path in _require(indir, pattern):
        m = re.match(regex, path.name)
        if m:
            out[tuple(int(g) for g in m.groups())] = path
    return out


def _heat_panel(ax, grid, image, title=None):
    """P x P grid bilinearly upscaled; alpha-blended over the image if given."""
    if image is not None:
        ax.imshow(image, cmap="gray", interpolation="bilinear")
        ax.imshow(grid, cmap=HEAT_CMAP, alpha=OVERLAY_ALPHA, interpolation="bilinear",
                  extent=(-0.5, image.shape[1] - 0.5, image.shape[0] - 0.5, -0.5))
    else:
        ax.imshow(grid, cmap=HEAT_CMAP, interpolation="bilinear")
    if title:
        ax.set_title(title, fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])


def render_rollout(indir, image, dpi):
    files = _require(indir, "rollout_r*.csv")
    ratios = sorted(float(f.stem.split("_r")[1]) for f in files)
    fig, axes = plt.subplots(1, len(ratios), figsize=(3 * len(ratios), 3.2))
    axes = np.atleast_1d(axes)
    for ax, ratio in zip(axes, ratios):
        grid = read_csv_matrix(Path(indir) / f"rollout_r{ratio:g}.csv")
        _heat_panel(ax, grid, image, title=f"discard {ratio:g}")
    fig.suptitle("attention rollout")
    return fig


def render_sigma(indir, image, dpi):
    table = read_csv_matrix(_require(indir, "sigma.csv")[0])  # [L, H]
    layers, heads = table.shape
    fig, (ax_hm, ax_ln) = plt.subplots(1, 2, figsize=(9, 3.5))
    im = ax_hm.imshow(table.T, cmap=SIGMA_CMAP, aspect="auto")  # heads x layers
    ax_hm.set_xlabel("layer")
    ax_hm.set_ylabel("head")
    ax_hm.set_title("learned bandwidths")
    fig.colorbar(im, ax=ax_hm, fraction=0.046)
    for h in range(heads):
        ax_ln.plot(range(layers), table[:, h], marker="o", label=f"head {h}")
    ax_ln.set_xlabel("layer")
    ax_ln.set_ylabel("sigma")
    ax_ln.set_title("per-head trajectories")
    ax_ln.legend(fontsize=7)
    return fig


def render_cls(indir, image, dpi):
    grids = _indexed(indir, "cls_L*_H*.csv", r"cls_L(\d+)_H(\d+)\.csv")
    layers = 1 + max(l for l, _ in grids)
    heads = 1 + max(h for _, h in grids)
    fig, axes = plt.subplots(layers, heads, figsize=(2.2 * heads, 2.2 * layers),
                             squeeze=False)
    for (l, h), path in sorted(grids.items()):
        _heat_panel(axes[l][h], read_csv_matrix(path), image, title=f"L{l} H{h}")
    fig.suptitle("CLS-to-patch attention per head")
    return fig


def render_patch(indir, image, dpi):
    grids = _indexed(indir, "patch_L*_q*.csv", r"patch_L(\d+)_q(\d+)\.csv")
    layers = 1 + max(l for l, _ in grids)
    queries = 1 + max(q for _, q in grids)
    fig, axes = plt.subplots(layers, queries, figsize=(2.2 * queries, 2.2 * layers),
                             squeeze=False)
    for (l, q), path in sorted(grids.items()):
        grid = read_csv_matrix(path)
        p = grid.shape[0]
        coords = [(p // 4, p // 4), (p // 2, p // 2),
                  (3 * p // 4, 3 * p // 4), (p // 4, 3 * p // 4)]
        ax = axes[l][q]
        _heat_panel(ax, grid, image, title=f"L{l} q{q}")
        r, c = coords[q]
        if image is not None:
            cell = image.shape[0] / p
            box = plt.Rectangle((c * cell - 0.5, r * cell - 0.5), cell, cell,
                                fill=False, edgecolor="cyan", linewidth=1.5)
        else:
            box = plt.Rectangle((c - 0.5, r - 0.5), 1.0, 1.0, fill=False,
                                edgecolor="cyan", linewidth=1.5)
        ax.add_patch(box)
    fig.suptitle("patch-to-patch attention (query boxed)")
    return fig


def render_raw(indir, image, dpi):
    grids = _indexed(indir, "raw_L*_H*.csv", r"raw_L(\d+)_H(\d+)\.csv")
    layers = 1 + max(l for l, _ in grids)
    heads = 1 + max(h for _, h in grids)
    fig, axes = plt.subplots(layers, heads, figsize=(2.4 * heads, 2.4 * layers),
                             squeeze=False)
    for (l, h), path in sorted(grids.items()):
        ax = axes[l][h]
        ax.imshow(read_csv_matrix(path), cmap=MATRIX_CMAP, interpolation="nearest")
        ax.set_title(f"L{l} H{h}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle("raw mixing matrices (diagonal masked)")
    return fig


def render_evolution(indir, image, dpi):
    full = _indexed(indir, "evo_L*_full.csv", r"evo_L(\d+)_full\.csv")
    cls = _indexed(indir, "evo_L*_cls.csv", r"evo_L(\d+)_cls\.csv")
    layers = 1 + max(l for (l,) in full)
    fig, axes = plt.subplots(layers, 3, figsize=(7.5, 2.4 * layers), squeeze=False)
    for (l,), path in sorted(full.items()):
        axes[l][0].imshow(read_csv_matrix(path), cmap=MATRIX_CMAP, interpolation="nearest")
        axes[l][0].set_ylabel(f"layer {l}", fontsize=8)
        axes[l][0].set_xticks([])
        axes[l][0].set_yticks([])
        grid = read_csv_matrix(cls[(l,)])
        _heat_panel(axes[l][1], grid, None)
        _heat_panel(axes[l][2], grid, image)
    axes[0][0].set_title("head-avg matrix", fontsize=8)
    axes[0][1].set_title("CLS heat", fontsize=8)
    axes[0][2].set_title("CLS overlay", fontsize=8)
    return fig


RENDERERS = {
    "rollout": render_rollout,
    "sigma": render_sigma,
    "cls": render_cls,
    "patch": render_patch,
    "raw": render_raw,
    "evolution": render_evolution,
}


def render(job):
    """Render one FigureJob to its output path; returns the path."""
    image = read_pgm(job.image) if job.image else None
    fig = RENDERERS[job.kind](job.indir, image, job.dpi)
    out = Path(job.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=job.dpi)
    plt.close(fig)
    return out
