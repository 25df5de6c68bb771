"""Desk-scale training: AdamW, losses, metrics (incl. bits-per-byte),
synthetic task generators, and the finite-difference gradient-check harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernel_attention as ka
from .errors import InputError, NumericError, ParameterError

TASK_KINDS = ("cluster_regression", "copy_lm", "cluster_classify")

LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0


class AdamW:
    """Decoupled weight-decay Adam over a flat name -> ndarray dict.

    Names in the exempt set (log-bandwidths, LN params, biases, positional
    embeddings, CLS token) never receive decay.
    """

    def __init__(self, params, config, exempt=frozenset()):
        self.config = config
        self.exempt = set(exempt)
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        cfg = self.config
        b1, b2 = cfg.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name in sorted(params):
            g = grads[name]
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient for {name!r} at step {t}")
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            update = mhat / (np.sqrt(vhat) + cfg.eps)
            if cfg.weight_decay and name not in self.exempt:
                update = update + cfg.weight_decay * params[name]
            params[name] -= (cfg.lr * update).astype(params[name].dtype)


def clip_global_norm(grads, max_norm):
    """Scale the whole gradient dict so its global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


# ---------------------------------------------------------------------------
# Losses and metrics


def cross_entropy(logits, targets, ignore_index=-1):
    """Mean token-level NLL in nats, with its logits gradient.

    targets equal to ignore_index contribute neither loss nor gradient.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ParameterError(f"logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    tgt = targets.reshape(-1)
    live = tgt != ignore_index
    if ((tgt[live] < 0) | (tgt[live] >= v)).any():
        raise InputError(f"target out of range [0, {v})")
    count = int(live.sum())
    if count == 0:
        raise ParameterError("cross_entropy with no live targets")
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    idx = np.arange(flat.shape[0])
    nll = np.where(live, logz - shifted[idx, np.where(live, tgt, 0)], 0.0)
    loss = float(nll.sum() / count)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    grad = probs
    grad[idx[live], tgt[live]] -= 1.0
    grad[~live] = 0.0
    grad /= count
    return loss, grad.reshape(logits.shape).astype(logits.dtype)


def mse_loss(pred, target):
    """Mean squared error with its gradient."""
    diff = pred - target
    loss = float((diff.astype(np.float64) ** 2).mean())
    grad = (2.0 / diff.size) * diff
    return loss, grad


def bits_per_byte(total_nats, total_bytes):
    """Language-model loss normalized to bits per byte of raw text."""
    if total_bytes <= 0:
        raise ParameterError(f"total_bytes must be > 0, got {total_bytes}")
    return total_nats / (LN2 * total_bytes)


# ---------------------------------------------------------------------------
# Synthetic tasks


@dataclass
class TaskSpec:
    kind: str = "cluster_regression"
    seed: int = 0
    batch: int = 32
    # cluster tasks
    clusters: int = 4
    tokens_per_cluster: int = 8
    dim: int = 8
    center_scale: float = 10.0
    spread: float = 0.1
    # copy task
    vocab: int = 16
    prefix_len: int = 8
    # classification task (grid of patches per synthetic image)
    grid: int = 4
    patch_dim: int = 64

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ParameterError(f"task kind {self.kind!r} not in {TASK_KINDS}")


def _cluster_centers(spec, rng):
    while True:
        centers = rng.standard_normal((spec.clusters, spec.dim)) * spec.center_scale
        if spec.clusters == 1:
            return centers
        d = np.sqrt(((centers[:, None] - centers[None, :]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        if d.min() >= 2.0 * spec.center_scale:
            return centers


def gen_cluster_regression(spec):
    """Tokens around well-separated centroids; target is each token's
    within-sequence cluster mean (what an ideal kernel smoother outputs).

    The dataset is a fixed deterministic function of the spec, so training
    on it is full-batch optimization of one stationary objective.
    """
    rng = np.random.default_rng(spec.seed)
    centers = _cluster_centers(spec, rng)
    b, k, m = spec.batch, spec.clusters, spec.tokens_per_cluster
    noise = rng.standard_normal((b, k, m, spec.dim)) * spec.spread
    tokens = centers[None, :, None, :] + noise
    targets = np.broadcast_to(tokens.mean(axis=2, keepdims=True), tokens.shape)
    return tokens.reshape(b, k * m, spec.dim), targets.reshape(b, k * m, spec.dim).copy()


def gen_copy_lm(spec, rng=None):
    """[prefix, DELIM, prefix] streams; returns (inputs, targets, answer_mask).

    Token 0 is the delimiter; prefixes are distinct tokens from 1..vocab-1, so
    every answer position has a unique correct token. inputs[t] predicts
    targets[t]; answer positions are the second copy.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if spec.prefix_len > spec.vocab - 1:
        raise ParameterError("prefix_len must be < vocab (token 0 is the delimiter)")
    b, p = spec.batch, spec.prefix_len
    prefixes = np.empty((b, p), dtype=np.int64)
    for i in range(b):
        prefixes[i] = rng.permutation(np.arange(1, spec.vocab))[:p]
    seq = np.concatenate([prefixes, np.zeros((b, 1), dtype=np.int64), prefixes], axis=1)
    inputs, targets = seq[:, :-1], seq[:, 1:]
    answer_mask = np.zeros_like(inputs, dtype=bool)
    answer_mask[:, p:] = True
    return inputs, targets, answer_mask


def gen_cluster_classify(spec, rng=None):
    """Synthetic patch grids for ViT training: every patch of an item sits
    near one class centroid; the label is the centroid index. Centroids are
    fixed by the spec seed; batches resample noise and labels."""
    centers_rng = np.random.default_rng(spec.seed)
    centers = centers_rng.standard_normal((spec.clusters, spec.patch_dim)) * spec.center_scale
    rng = rng if rng is not None else np.random.default_rng(spec.seed + 1)
    labels = rng.integers(0, spec.clusters, size=spec.batch)
    n_patch = spec.grid * spec.grid
    noise = rng.standard_normal((spec.batch, n_patch, spec.patch_dim)) * spec.spread
    patches = centers[labels][:, None, :] + noise
    return patches, labels


# ---------------------------------------------------------------------------
# Single-layer kernel smoother (the cluster-regression model)


class GkaRegressor:
    """One GKA layer with identity output projection; only the per-head
    log-bandwidths train. Makes the kernel-regression reading directly
    testable."""

    def __init__(self, dim, heads=1, log_sigma_init=0.0, dtype=np.float64):
        self.dim = dim
        self.heads = heads
        self.dtype = dtype
        self.params = {"log_sigma": np.full(heads, log_sigma_init, dtype=dtype)}
        self._w_o = np.eye(dim, dtype=dtype)
        self._b_o = np.zeros(dim, dtype=dtype)

    def layer_params(self):
        eps = ka.KERNEL_EPS_DOUBLE if self.dtype == np.float64 else ka.KERNEL_EPS_SINGLE
        return ka.GkaLayerParams(log_sigma=self.params["log_sigma"],
                                 w_o=self._w_o, b_o=self._b_o, epsilon=eps)

    def forward(self, tokens, train_mode=False, capture=None, rng=None):
        out = ka.gka_forward(np.asarray(tokens, dtype=self.dtype), self.layer_params(),
                             None, 0, capture)
        return out, {"tokens": np.asarray(tokens, dtype=self.dtype)}

    def backward(self, cache, grad_out):
        _, g_ls, _, _ = ka.gka_backward(cache["tokens"], self.layer_params(), None, grad_out)
        return {"log_sigma": g_ls}

    def exempt_names(self):
        return {"log_sigma"}

    def log_sigma_table(self):
        return ka.BandwidthParams(self.params["log_sigma"][None, :])


# ---------------------------------------------------------------------------
# Training loop


def _train_step(model, task, rng, fixed_batch=None):
    """One task-specific forward/loss/backward; returns (loss, acc, grads)."""
    if task.kind == "copy_lm":
        ids, targets, answers = gen_copy_lm(task, rng)
        logits, cache = model.forward(ids, train_mode=True, rng=rng)
        loss, dlogits = cross_entropy(logits, targets)
        pred = logits.argmax(axis=-1)
        acc = float((pred == targets)[answers].mean())
        return loss, acc, model.backward(cache, dlogits)
    if task.kind == "cluster_classify":
        patches, labels = gen_cluster_classify(task, rng)
        logits, cache = model.forward(patches, train_mode=True, rng=rng)
        loss, dlogits = cross_entropy(logits, labels)
        acc = float((logits.argmax(axis=-1) == labels).mean())
        return loss, acc, model.backward(cache, dlogits)
    tokens, targets = fixed_batch
    pred, cache = model.forward(tokens, train_mode=True, rng=rng)
    loss, dpred = mse_loss(pred, targets)
    return loss, float("nan"), model.backward(cache, dpred)


def train_loop(model, task, steps, opt_config=None, seed=0, log_every=50, csv_path=None):
    """Iterate forward -> loss -> backward -> AdamW; returns the metric trace.

    Deterministic given seed. Emits loss, accuracy, bpb (LM tasks) and every
    per-layer/head sigma at each logged step; aborts on NaN loss with the
    last good step in the message.
    """
    opt_config = opt_config or AdamWConfig()
    rng = np.random.default_rng(seed)
    opt = AdamW(model.params, opt_config, exempt=model.exempt_names())
    try:
        depth, heads = model.log_sigma_table().log_sigma.shape
        sigma_names = [f"sigma_L{l}_H{h}" for l in range(depth) for h in range(heads)]
    except KeyError:  # non-gka attention carries no bandwidths
        sigma_names = []
    fixed_batch = gen_cluster_regression(task) if task.kind == "cluster_regression" else None
    trace = []
    last_good = -1
    for t in range(steps):
        loss, acc, grads = _train_step(model, task, rng, fixed_batch)
        if math.isnan(loss):
            raise NumericError(f"NaN loss at step {t}; last good step {last_good}")
        if opt_config.clip_norm is not None:
            clip_global_norm(grads, opt_config.clip_norm)
        opt.step(model.params, grads)
        last_good = t
        if t % log_every == 0 or t == steps - 1:
            row = {"step": t, "loss": loss, "accuracy": acc,
                   "bpb": loss / LN2 if task.kind == "copy_lm" else float("nan")}
            if sigma_names:
                sig = np.exp(model.log_sigma_table().log_sigma).reshape(-1)
                row.update({name: float(s) for name, s in zip(sigma_names, sig)})
            trace.append(row)
    if csv_path is not None:
        write_metrics_csv(csv_path, trace, sigma_names)
    return trace


def write_metrics_csv(path, trace, sigma_names):
    cols = ["step", "loss", "accuracy", "bpb"] + list(sigma_names)
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for row in trace:
            f.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{v:.9g}"


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    worst: str = ""
    per_param: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance


def finite_difference_check(loss_fn, params, analytic, step=1e-5, tolerance=1e-4):
    """Central finite differences over every entry of every tensor in params.

    loss_fn reads the (in-place perturbed) arrays. Relative error uses
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    report = GradCheckReport(tolerance=tolerance)
    for name in sorted(params):
        arr = params[name]
        worst = 0.0
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report.per_param[name] = worst
        if worst >= report.max_rel_err:
            report.max_rel_err = worst
            report.worst = name
    return report


def check_gka_op(seed=0, b=1, n=6, d_model=8, heads=2, mask=None, use_rope=False,
                 unit_norm=False, tolerance=1e-4, corrupt=False):
    """FD-certify all four GKA gradients on a small double-precision case.

    The probe direction is scaled down so central-difference roundoff noise
    on structurally-zero gradients stays below the relative-error floor.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, n, d_model))
    gout = rng.standard_normal((b, n, d_model)) * 0.01
    tensors = {
        "x": x,
        "log_sigma": rng.standard_normal(heads) * 0.3,
        "w_o": rng.standard_normal((d_model, d_model)) * 0.3,
        "b_o": rng.standard_normal(d_model) * 0.3,
    }
    layer = ka.GkaLayerParams(log_sigma=tensors["log_sigma"], w_o=tensors["w_o"],
                              b_o=tensors["b_o"], epsilon=ka.KERNEL_EPS_DOUBLE,
                              use_rope=use_rope, unit_norm=unit_norm)

    def loss_fn():
        return float((ka.gka_forward(tensors["x"], layer, mask) * gout).sum())

    gx, gls, gwo, gbo = ka.gka_backward(tensors["x"], layer, mask, gout)
    if corrupt:
        gls = -gls
    analytic = {"x": gx, "log_sigma": gls, "w_o": gwo, "b_o": gbo}
    return finite_difference_check(loss_fn, tensors, analytic, tolerance=tolerance)


def check_mha_op(seed=0, b=1, n=5, d_model=8, heads=2, variant="standard", mask=None,
                 tolerance=1e-4):
    """FD-certify the baseline attention gradients (standard or vlt)."""
    from .baseline_attention import MhaLayerParams, mha_backward, mha_forward

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, n, d_model))
    gout = rng.standard_normal((b, n, d_model)) * 0.01
    names = ["w_q", "b_q", "w_k", "b_k", "w_o", "b_o"]
    if variant == "standard":
        names += ["w_v", "b_v"]
    tensors = {"x": x}
    for nm in names:
        shape = (d_model, d_model) if nm.startswith("w") else (d_model,)
        tensors[nm] = rng.standard_normal(shape) * 0.3
    layer = MhaLayerParams(num_heads=heads, variant=variant,
                           **{nm: tensors[nm] for nm in names})

    def loss_fn():
        return float((mha_forward(tensors["x"], layer, mask) * gout).sum())

    grads = mha_backward(tensors["x"], layer, mask, gout)
    analytic = {nm: grads[nm] for nm in names}
    analytic["x"] = grads["x"]
    return finite_difference_check(loss_fn, tensors, analytic, tolerance=tolerance)


def check_block_stack(seed=0, depth=2, d_model=8, heads=2, n=6, kind="gka",
                      masked=True, tolerance=1e-4):
    """FD-certify a stack of pre-norm blocks end to end (double precision)."""
    from .model import ModelConfig, block_forward, block_backward, block_params_from, init_params

    cfg = ModelConfig(family="causal_lm", attention_kind=kind, depth=depth,
                      heads=heads, width=d_model, vocab_size=7, seq_len=max(n, 2),
                      use_rope=(kind == "gka"), unit_norm=(kind == "gka"))
    rng = np.random.default_rng(seed)
    full = init_params(cfg, rng, dtype=np.float64)
    tensors = {k: v for k, v in full.items() if k.startswith("blocks.")}
    for name, arr in tensors.items():
        if name.endswith(("w_q", "w_k", "w_v", "w_o", "w1", "w2")):
            arr += rng.standard_normal(arr.shape) * 0.05
        if name.endswith("log_sigma"):
            arr += rng.standard_normal(arr.shape) * 0.2
    tensors["x"] = rng.standard_normal((1, n, d_model))
    gout = rng.standard_normal((1, n, d_model))
    mask = cfg.mask_spec() if masked else None

    def run():
        x = tensors["x"]
        caches = []
        for i in range(depth):
            bp = block_params_from(tensors, f"blocks.{i}.", cfg, np.float64)
            x, cache = block_forward(x, bp, mask, i)
            caches.append(cache)
        return x, caches

    def loss_fn():
        out, _ = run()
        return float((out * gout).sum())

    out, caches = run()
    g = gout
    analytic = {}
    for i in reversed(range(depth)):
        g, local = block_backward(caches[i], g)
        for key, val in local.items():
            analytic[f"blocks.{i}.{key}"] = val
    analytic["x"] = g
    return finite_difference_check(loss_fn, tensors, analytic, tolerance=tolerance)


def check_model(seed=0, family="causal_lm", tolerance=1e-4):
    """FD-certify a whole tiny model through its task loss."""
    from .model import ModelConfig, build_model

    if family == "causal_lm":
        cfg = ModelConfig(family="causal_lm", attention_kind="gka", depth=2, heads=2,
                          width=8, vocab_size=9, seq_len=8, layer_pattern="SL",
                          window_size=2, use_rope=True, unit_norm=True)
        model = build_model(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed + 1)
        ids = rng.integers(0, cfg.vocab_size, size=(2, 6))
        targets = rng.integers(0, cfg.vocab_size, size=(2, 6))

        def loss_fn():
            logits, _ = model.forward(ids)
            return cross_entropy(logits, targets)[0]

        logits, cache = model.forward(ids)
        _, dlogits = cross_entropy(logits, targets)
        analytic = model.backward(cache, dlogits)
    else:
        cfg = ModelConfig(family="vit", attention_kind="gka", depth=2, heads=2,
                          width=8, patch_size=4, image_size=8, num_classes=3,
                          in_channels=1)
        model = build_model(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed + 1)
        patches = rng.standard_normal((2, 4, cfg.patch_dim))
        labels = rng.integers(0, 3, size=2)

        def loss_fn():
            logits, _ = model.forward(patches)
            return cross_entropy(logits, labels)[0]

        logits, cache = model.forward(patches)
        _, dlogits = cross_entropy(logits, labels)
        analytic = model.backward(cache, dlogits)
    return finite_difference_check(loss_fn, model.params, analytic, tolerance=tolerance)


def grad_check(target="gka", seed=0, tolerance=1e-4):
    """Named gradient-check entry point used by the CLI."""
    checks = {
        "gka": lambda: check_gka_op(seed=seed, tolerance=tolerance),
        "gka-lm": lambda: check_gka_op(seed=seed, use_rope=True, unit_norm=True,
                                       mask=ka.MaskSpec("causal"), tolerance=tolerance),
        "mha": lambda: check_mha_op(seed=seed, tolerance=tolerance),
        "vlt": lambda: check_mha_op(seed=seed, variant="vlt", tolerance=tolerance),
        "block": lambda: check_block_stack(seed=seed, tolerance=tolerance),
        "model": lambda: check_model(seed=seed, tolerance=tolerance),
    }
    if target not in checks:
        raise ParameterError(f"unknown gradcheck target {target!r}; valid: {sorted(checks)}")
    return checks[target]()
