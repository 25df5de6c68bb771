"""Transformer assemblies (pre-norm blocks, ViT-style classifier, causal LM)
plus the analytical parameter/FLOP counters.

Parameters live in a flat name -> ndarray dict; param_shapes() is the single
source of truth shared by initialization and the counters, so counted numbers
are exactly the trainable arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import baseline_attention as base_attn
from . import kernel_attention as ka
from .errors import ConfigError, InputError, ShapeError
from .numerics import LN_EPS_DEFAULT, gelu, gelu_grad

ATTENTION_KINDS = ("gka", "standard", "vlt")
FAMILIES = ("vit", "causal_lm")

INIT_STD = 0.02


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class ModelConfig:
    family: str = "vit"
    depth: int = 12
    heads: int = 3
    width: int = 192
    mlp_ratio: int = 4
    attention_kind: str = "gka"
    # vision
    patch_size: int = 16
    image_size: int = 224
    num_classes: int = 1000
    in_channels: int = 3
    use_cls: bool = True
    # language model
    vocab_size: int = 0
    seq_len: int = 0
    layer_pattern: str = ""
    window_size: int = 0
    use_rope: bool = False
    unit_norm: bool = False
    rope_base: float = 10000.0
    # bias convention per weight group; the defaults are the frozen
    # convention the reference model sizes reproduce under (see README)
    attn_bias: bool = False
    mlp_bias: bool = True
    io_bias: bool = True  # patch embed, classifier head, unembedding
    # regularization
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family {self.family!r} not in {FAMILIES}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind {self.attention_kind!r} not in {ATTENTION_KINDS}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.family == "vit" and self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")
        if self.family == "causal_lm" and (self.vocab_size < 1 or self.seq_len < 1):
            raise ConfigError("causal_lm requires vocab_size and seq_len")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def patch_dim(self):
        return self.in_channels * self.patch_size * self.patch_size

    @property
    def num_tokens(self):
        if self.family == "vit":
            return self.grid * self.grid + (1 if self.use_cls else 0)
        return self.seq_len

    def mask_spec(self):
        if self.family == "vit":
            return None
        if self.layer_pattern:
            return ka.MaskSpec("causal", window_size=self.window_size or None,
                               layer_pattern=self.layer_pattern)
        if self.window_size:
            return ka.MaskSpec("causal_window", window_size=self.window_size)
        return ka.MaskSpec("causal")


def _vit_cfg(kind, depth, heads, width, **kw):
    return ModelConfig(family="vit", attention_kind=kind, depth=depth, heads=heads,
                       width=width, **kw)


PRESETS = {
    "deit-ti": _vit_cfg("standard", 12, 3, 192),
    "gka-ti": _vit_cfg("gka", 12, 3, 192),
    "vlt-ti": _vit_cfg("vlt", 12, 3, 192),
    "deit-s": _vit_cfg("standard", 12, 6, 384),
    "gka-s": _vit_cfg("gka", 12, 6, 384),
    "vlt-s": _vit_cfg("vlt", 12, 6, 384),
    "deit-b": _vit_cfg("standard", 12, 12, 768),
    "gka-b": _vit_cfg("gka", 12, 12, 768),
    "vlt-b": _vit_cfg("vlt", 12, 12, 768),
    "gka-lm-d20": ModelConfig(family="causal_lm", attention_kind="gka", depth=20,
                              heads=10, width=1280, vocab_size=32768, seq_len=2048,
                              layer_pattern="SSSL", window_size=1024,
                              use_rope=True, unit_norm=True),
    "gka-lm-toy": ModelConfig(family="causal_lm", attention_kind="gka", depth=2,
                              heads=4, width=64, vocab_size=16, seq_len=32,
                              layer_pattern="SL", window_size=2,
                              use_rope=True, unit_norm=True),
    "gka-vit-toy": _vit_cfg("gka", 2, 2, 32, patch_size=8, image_size=32,
                            num_classes=4, in_channels=1),
}


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid: {', '.join(sorted(PRESETS))}")
    return replace(PRESETS[name])


def save_config(config, path):
    with open(path, "w") as f:
        for fld in fields(config):
            f.write(f"{fld.name}={getattr(config, fld.name)}\n")


def load_config(path):
    """Parse the plain key=value config format into a ModelConfig."""
    raw = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line {line!r}")
            key, val = line.split("=", 1)
            raw[key.strip()] = val.strip()
    kwargs = {}
    by_name = {fld.name: fld for fld in fields(ModelConfig)}
    for key, val in raw.items():
        if key not in by_name:
            raise ConfigError(f"unknown config key {key!r}")
        typ = by_name[key].type
        if typ in ("bool", bool):
            kwargs[key] = val.lower() in ("1", "true", "yes")
        elif typ in ("int", int):
            kwargs[key] = int(val)
        elif typ in ("float", float):
            kwargs[key] = float(val)
        else:
            kwargs[key] = val
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# Parameter registry


def param_shapes(config):
    """Ordered (name, shape) list of every trainable tensor."""
    d, h, r = config.width, config.heads, config.mlp_ratio
    ab, mb, ib = config.attn_bias, config.mlp_bias, config.io_bias
    shapes = []
    if config.family == "vit":
        shapes.append(("patch_embed.w", (config.patch_dim, d)))
        if ib:
            shapes.append(("patch_embed.b", (d,)))
        if config.use_cls:
            shapes.append(("cls_token", (d,)))
        shapes.append(("pos_embed", (config.num_tokens, d)))
    else:
        shapes.append(("embed.w", (config.vocab_size, d)))
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes += [(p + "ln1.gamma", (d,)), (p + "ln1.beta", (d,))]
        if config.attention_kind == "gka":
            shapes.append((p + "attn.log_sigma", (h,)))
            proj = ["w_o"]
        elif config.attention_kind == "standard":
            proj = ["w_q", "w_k", "w_v", "w_o"]
        else:
            proj = ["w_q", "w_k", "w_o"]
        for w in proj:
            shapes.append((p + f"attn.{w}", (d, d)))
            if ab:
                shapes.append((p + f"attn.{w.replace('w', 'b')}", (d,)))
        shapes += [(p + "ln2.gamma", (d,)), (p + "ln2.beta", (d,))]
        shapes.append((p + "mlp.w1", (d, r * d)))
        if mb:
            shapes.append((p + "mlp.b1", (r * d,)))
        shapes.append((p + "mlp.w2", (r * d, d)))
        if mb:
            shapes.append((p + "mlp.b2", (d,)))
    shapes += [("norm.gamma", (d,)), ("norm.beta", (d,))]
    if config.family == "vit":
        shapes.append(("head.w", (d, config.num_classes)))
        if ib:
            shapes.append(("head.b", (config.num_classes,)))
    else:
        shapes.append(("unembed.w", (d, config.vocab_size)))
        if ib:
            shapes.append(("unembed.b", (config.vocab_size,)))
    return shapes


def init_params(config, rng, dtype=np.float32):
    params = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gamma",):
            arr = np.ones(shape, dtype=dtype)
        elif leaf in ("beta",) or leaf.startswith("b"):
            arr = np.zeros(shape, dtype=dtype)
        elif leaf == "log_sigma":
            arr = np.zeros(shape, dtype=dtype)  # sigma = 1 at init
        else:
            arr = (rng.standard_normal(shape) * INIT_STD).astype(dtype)
        params[name] = arr
    return params


def decay_exempt(name):
    """Weight decay is disabled for biases, LN params, positional embeddings,
    the CLS token, and the log-bandwidths."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("gamma", "beta", "log_sigma") or leaf.startswith("b"):
        return True
    return name in ("cls_token", "pos_embed")


def collect_log_sigma(params, depth):
    """Stack per-block log-bandwidths into BandwidthParams [L, H]."""
    rows = [params[f"blocks.{i}.attn.log_sigma"] for i in range(depth)]
    return ka.BandwidthParams(np.stack(rows))


# ---------------------------------------------------------------------------
# Layer helpers (forward/backward pairs)


def linear_fwd(x, w, b):
    return np.matmul(x, w) + b


def linear_bwd(x, w, grad_out):
    grad_x = np.matmul(grad_out, w.T)
    gw = np.tensordot(x, grad_out, axes=(tuple(range(x.ndim - 1)),) * 2)
    gb = grad_out.sum(axis=tuple(range(grad_out.ndim - 1)))
    return grad_x, gw, gb


def layer_norm_fwd(x, gamma, beta, eps=LN_EPS_DEFAULT):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma)


def layer_norm_bwd(cache, grad_out):
    xhat, inv_std, gamma = cache
    gy = grad_out * gamma
    grad_x = inv_std * (gy - gy.mean(axis=-1, keepdims=True)
                        - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
    ggamma = (grad_out * xhat).sum(axis=tuple(range(grad_out.ndim - 1)))
    gbeta = grad_out.sum(axis=tuple(range(grad_out.ndim - 1)))
    return grad_x, ggamma, gbeta


def drop_path_fwd(branch, rate, train_mode, rng):
    """Per-sample stochastic skip with survival rescaling; identity in eval."""
    if not train_mode or rate <= 0.0:
        return branch, None
    b = branch.shape[0]
    keep = (rng.random(b) >= rate).astype(branch.dtype) / (1.0 - rate)
    keep = keep.reshape((b,) + (1,) * (branch.ndim - 1))
    return branch * keep, keep


def drop_path_bwd(keep, grad_out):
    return grad_out if keep is None else grad_out * keep


# ---------------------------------------------------------------------------
# Blocks


@dataclass
class BlockParams:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    attn: object  # GkaLayerParams | MhaLayerParams
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    drop_path_rate: float = 0.0


def _bias_or_zero(params, name, n, dtype):
    """Registered bias array, or a fixed zero vector when the group is bias-free."""
    arr = params.get(name)
    return arr if arr is not None else np.zeros(n, dtype=dtype)


def block_params_from(params, prefix, config, dtype):
    d = config.width
    eps = ka.KERNEL_EPS_DOUBLE if dtype == np.float64 else ka.KERNEL_EPS_SINGLE
    if config.attention_kind == "gka":
        attn = ka.GkaLayerParams(
            log_sigma=params[prefix + "attn.log_sigma"],
            w_o=params[prefix + "attn.w_o"],
            b_o=_bias_or_zero(params, prefix + "attn.b_o", d, dtype),
            epsilon=eps, use_rope=config.use_rope, unit_norm=config.unit_norm,
            rope_base=config.rope_base)
    else:
        kw = dict(num_heads=config.heads, variant=config.attention_kind)
        for w in ("w_q", "w_k", "w_o") + (("w_v",) if config.attention_kind == "standard" else ()):
            kw[w] = params[prefix + f"attn.{w}"]
            b = w.replace("w", "b")
            kw[b] = _bias_or_zero(params, prefix + f"attn.{b}", d, dtype)
        attn = base_attn.MhaLayerParams(**kw)
    return BlockParams(
        ln1_gamma=params[prefix + "ln1.gamma"], ln1_beta=params[prefix + "ln1.beta"],
        attn=attn,
        ln2_gamma=params[prefix + "ln2.gamma"], ln2_beta=params[prefix + "ln2.beta"],
        w1=params[prefix + "mlp.w1"],
        b1=_bias_or_zero(params, prefix + "mlp.b1", config.mlp_ratio * d, dtype),
        w2=params[prefix + "mlp.w2"],
        b2=_bias_or_zero(params, prefix + "mlp.b2", d, dtype),
        drop_path_rate=config.drop_path_rate)


def block_forward(x, bp, mask=None, layer_index=0, train_mode=False, capture=None, rng=None):
    """Pre-norm attention + MLP block with residuals; returns (y, cache)."""
    ln1_out, ln1_cache = layer_norm_fwd(x, bp.ln1_gamma, bp.ln1_beta)
    if isinstance(bp.attn, ka.GkaLayerParams):
        attn_out = ka.gka_forward(ln1_out, bp.attn, mask, layer_index, capture)
    else:
        attn_out = base_attn.mha_forward(ln1_out, bp.attn, mask, layer_index)
    dp1_out, keep1 = drop_path_fwd(attn_out, bp.drop_path_rate, train_mode, rng)
    x1 = x + dp1_out
    ln2_out, ln2_cache = layer_norm_fwd(x1, bp.ln2_gamma, bp.ln2_beta)
    pre = linear_fwd(ln2_out, bp.w1, bp.b1)
    act = gelu(pre)
    mlp_out = linear_fwd(act, bp.w2, bp.b2)
    dp2_out, keep2 = drop_path_fwd(mlp_out, bp.drop_path_rate, train_mode, rng)
    y = x1 + dp2_out
    cache = {"ln1_out": ln1_out, "ln1": ln1_cache, "keep1": keep1, "x1": x1,
             "ln2_out": ln2_out, "ln2": ln2_cache, "pre": pre, "act": act,
             "keep2": keep2, "mask": mask, "layer_index": layer_index, "bp": bp}
    return y, cache


def block_backward(cache, grad_y):
    """Gradients of block_forward; returns (grad_x, {local name: grad})."""
    bp = cache["bp"]
    grads = {}
    g_mlp_out = drop_path_bwd(cache["keep2"], grad_y)
    g_act, grads["mlp.w2"], grads["mlp.b2"] = linear_bwd(cache["act"], bp.w2, g_mlp_out)
    g_pre = g_act * gelu_grad(cache["pre"])
    g_ln2_out, grads["mlp.w1"], grads["mlp.b1"] = linear_bwd(cache["ln2_out"], bp.w1, g_pre)
    g_x1, grads["ln2.gamma"], grads["ln2.beta"] = layer_norm_bwd(cache["ln2"], g_ln2_out)
    g_x1 = g_x1 + grad_y
    g_attn_out = drop_path_bwd(cache["keep1"], g_x1)
    if isinstance(bp.attn, ka.GkaLayerParams):
        g_ln1_out, g_ls, g_wo, g_bo = ka.gka_backward(
            cache["ln1_out"], bp.attn, cache["mask"], g_attn_out, cache["layer_index"])
        grads["attn.log_sigma"] = g_ls
        grads["attn.w_o"], grads["attn.b_o"] = g_wo, g_bo
    else:
        ag = base_attn.mha_backward(
            cache["ln1_out"], bp.attn, cache["mask"], g_attn_out, cache["layer_index"])
        g_ln1_out = ag.pop("x")
        for key, val in ag.items():
            grads["attn." + key] = val
    g_x, grads["ln1.gamma"], grads["ln1.beta"] = layer_norm_bwd(cache["ln1"], g_ln1_out)
    grad_x = g_x + g_x1
    return grad_x, grads


# ---------------------------------------------------------------------------
# Whole models


def patchify(images, patch_size):
    """[B, C, H, W] -> [B, P*P, C*p*p] raw patches, row-major over the grid."""
    b, c, hh, ww = images.shape
    if hh % patch_size or ww % patch_size:
        raise ShapeError(f"image {hh}x{ww} not divisible by patch {patch_size}")
    gp, gq = hh // patch_size, ww // patch_size
    x = images.reshape(b, c, gp, patch_size, gq, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # [B, gp, gq, C, p, p]
    return x.reshape(b, gp * gq, c * patch_size * patch_size)


class _ModelBase:
    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params = init_params(config, np.random.default_rng(seed), dtype)
        self.mask = config.mask_spec()

    def block_params(self, i):
        return block_params_from(self.params, f"blocks.{i}.", self.config, self.dtype)

    def exempt_names(self):
        return {n for n in self.params if decay_exempt(n)}

    def log_sigma_table(self):
        return collect_log_sigma(self.params, self.config.depth)


class VitModel(_ModelBase):
    """Patch embed -> CLS -> position embeddings -> blocks -> LN -> head."""

    def forward(self, inputs, train_mode=False, capture=None, rng=None):
        cfg = self.config
        inputs = np.asarray(inputs, dtype=self.dtype)
        if inputs.ndim == 4:
            patches = patchify(inputs, cfg.patch_size)
        elif inputs.ndim == 3:
            patches = inputs
        else:
            raise ShapeError(f"expected images [B,C,H,W] or patches [B,P^2,pd], got {inputs.shape}")
        if patches.shape[1] != cfg.grid * cfg.grid or patches.shape[2] != cfg.patch_dim:
            raise ShapeError(
                f"patches {patches.shape[1:]} do not match grid {cfg.grid}^2 x {cfg.patch_dim}")
        b = patches.shape[0]
        emb = linear_fwd(patches, self.params["patch_embed.w"],
                         _bias_or_zero(self.params, "patch_embed.b", cfg.width, self.dtype))
        if cfg.use_cls:
            cls = np.broadcast_to(self.params["cls_token"], (b, 1, cfg.width))
            tokens = np.concatenate([cls, emb], axis=1)
        else:
            tokens = emb
        x = tokens + self.params["pos_embed"]
        caches = []
        for i in range(cfg.depth):
            x, cache = block_forward(x, self.block_params(i), self.mask, i,
                                     train_mode, capture, rng)
            caches.append(cache)
        normed, ln_cache = layer_norm_fwd(x, self.params["norm.gamma"], self.params["norm.beta"])
        pooled = normed[:, 0] if cfg.use_cls else normed.mean(axis=1)
        logits = linear_fwd(pooled, self.params["head.w"],
                            _bias_or_zero(self.params, "head.b", cfg.num_classes, self.dtype))
        return logits, {"patches": patches, "caches": caches, "ln": ln_cache,
                        "pooled": pooled, "normed_shape": normed.shape}

    def backward(self, cache, grad_logits):
        cfg = self.config
        grads = {}
        g_pooled, grads["head.w"], grads["head.b"] = linear_bwd(
            cache["pooled"], self.params["head.w"], grad_logits)
        g_normed = np.zeros(cache["normed_shape"], dtype=g_pooled.dtype)
        if cfg.use_cls:
            g_normed[:, 0] = g_pooled
        else:
            g_normed += g_pooled[:, None, :] / cache["normed_shape"][1]
        g_x, grads["norm.gamma"], grads["norm.beta"] = layer_norm_bwd(cache["ln"], g_normed)
        for i in reversed(range(cfg.depth)):
            g_x, local = block_backward(cache["caches"][i], g_x)
            for key, val in local.items():
                grads[f"blocks.{i}.{key}"] = val
        grads["pos_embed"] = g_x.sum(axis=0)
        if cfg.use_cls:
            grads["cls_token"] = g_x[:, 0].sum(axis=0)
            g_emb = g_x[:, 1:]
        else:
            g_emb = g_x
        _, grads["patch_embed.w"], grads["patch_embed.b"] = linear_bwd(
            cache["patches"], self.params["patch_embed.w"], g_emb)
        return {k: v for k, v in grads.items() if k in self.params}


class LmModel(_ModelBase):
    """Token embed -> blocks under the causal mask schedule -> LN -> vocab head."""

    def forward(self, token_ids, train_mode=False, capture=None, rng=None):
        cfg = self.config
        ids = np.asarray(token_ids)
        if ids.ndim != 2:
            raise ShapeError(f"expected token ids [B, N], got {ids.shape}")
        if ids.shape[1] > cfg.seq_len:
            raise InputError(f"sequence length {ids.shape[1]} exceeds seq_len {cfg.seq_len}")
        if (ids < 0).any() or (ids >= cfg.vocab_size).any():
            raise InputError(f"token id out of range [0, {cfg.vocab_size})")
        x = self.params["embed.w"][ids]
        caches = []
        for i in range(cfg.depth):
            x, cache = block_forward(x, self.block_params(i), self.mask, i,
                                     train_mode, capture, rng)
            caches.append(cache)
        normed, ln_cache = layer_norm_fwd(x, self.params["norm.gamma"], self.params["norm.beta"])
        logits = linear_fwd(normed, self.params["unembed.w"],
                            _bias_or_zero(self.params, "unembed.b", cfg.vocab_size, self.dtype))
        return logits, {"ids": ids, "caches": caches, "ln": ln_cache, "normed": normed}

    def backward(self, cache, grad_logits):
        cfg = self.config
        grads = {}
        g_normed, grads["unembed.w"], grads["unembed.b"] = linear_bwd(
            cache["normed"], self.params["unembed.w"], grad_logits)
        g_x, grads["norm.gamma"], grads["norm.beta"] = layer_norm_bwd(cache["ln"], g_normed)
        for i in reversed(range(cfg.depth)):
            g_x, local = block_backward(cache["caches"][i], g_x)
            for key, val in local.items():
                grads[f"blocks.{i}.{key}"] = val
        g_embed = np.zeros_like(self.params["embed.w"])
        np.add.at(g_embed, cache["ids"], g_x)
        grads["embed.w"] = g_embed
        return {k: v for k, v in grads.items() if k in self.params}


def build_model(config, seed=0, dtype=np.float32):
    cls = VitModel if config.family == "vit" else LmModel
    return cls(config, seed=seed, dtype=dtype)


def vit_forward(inputs, model, capture=None):
    """Convenience eval-mode forward; returns logits (and records capture)."""
    logits, _ = model.forward(inputs, train_mode=False, capture=capture)
    return logits


def lm_forward(token_ids, model, capture=None):
    logits, _ = model.forward(token_ids, train_mode=False, capture=capture)
    return logits


# ---------------------------------------------------------------------------
# Analytical counters

# Pointwise-op cost convention (per element), stated in every CostReport:
# a multiply-add counts 2 FLOPs; exp and div count 1 each.
LN_OPS = 8
GELU_OPS = 10
SOFTMAX_OPS = 4        # shift, exp, accumulate, divide per logit entry
GKA_KERNEL_OPS = 7     # distance assembly (3), scale, exp, accumulate, divide
MASK_OPS = 1
ROPE_OPS = 6
UNITNORM_OPS = 3

FLOP_CONVENTION = ("forward, mult-add=2; exp/div=1; layer-norm 8/elem, gelu 10/elem, "
                   "softmax 4/logit, gka kernel 7/entry; lm train estimate: "
                   "6*(params - input embedding) + 12*depth*width*mean_ctx")


@dataclass
class CostReport:
    total_params: int = 0
    attn_params: int = 0
    mlp_params: int = 0
    sigma_params: int = 0
    flops_forward: int = 0
    flops_per_token_train: int = 0
    breakdown: dict = field(default_factory=dict)
    convention: str = FLOP_CONVENTION

    def to_dict(self):
        return {"total_params": self.total_params, "attn_params": self.attn_params,
                "mlp_params": self.mlp_params, "sigma_params": self.sigma_params,
                "flops_forward": self.flops_forward,
                "flops_per_token_train": self.flops_per_token_train,
                "breakdown": dict(self.breakdown), "convention": self.convention}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def count_params(config):
    """Exact integer parameter counts under the frozen bias convention."""
    report = CostReport()
    breakdown = {"embed": 0, "attn": 0, "mlp": 0, "norm": 0, "head": 0, "other": 0}
    for name, shape in param_shapes(config):
        n = int(np.prod(shape))
        report.total_params += n
        if ".attn." in name:
            report.attn_params += n
            breakdown["attn"] += n
            if name.endswith("log_sigma"):
                report.sigma_params += n
        elif ".mlp." in name:
            report.mlp_params += n
            breakdown["mlp"] += n
        elif name.startswith(("patch_embed", "embed", "pos_embed", "cls_token")):
            breakdown["embed"] += n
        elif name.startswith(("head", "unembed")):
            breakdown["head"] += n
        elif "ln" in name or name.startswith("norm"):
            breakdown["norm"] += n
        else:
            breakdown["other"] += n
    report.breakdown = {"params_" + k: v for k, v in breakdown.items()}
    return report


def _linear_flops(n_tokens, fin, fout):
    return 2 * n_tokens * fin * fout + n_tokens * fout


def _attn_flops(config, n, ctx, masked):
    """Forward FLOPs of one attention layer at n query tokens, ctx keys."""
    d, h = config.width, config.heads
    kind = config.attention_kind
    cost = 0
    if kind in ("standard", "vlt"):
        nproj = 3 if kind == "standard" else 2
        cost += nproj * _linear_flops(n, d, d)
        cost += 2 * n * ctx * d + n * ctx * h          # QK^T and 1/sqrt(d) scale
        cost += SOFTMAX_OPS * n * ctx * h
        if masked:
            cost += MASK_OPS * n * ctx * h
        cost += 2 * n * ctx * d                        # PV
    else:
        if config.use_rope:
            cost += ROPE_OPS * n * d
        if config.unit_norm:
            cost += UNITNORM_OPS * n * d
        cost += 2 * n * d                              # squared norms
        cost += 2 * n * ctx * d                        # Gram tile
        cost += GKA_KERNEL_OPS * n * ctx * h
        if masked:
            cost += MASK_OPS * n * ctx * h
        cost += 2 * n * ctx * d                        # diffusion W @ X
    cost += _linear_flops(n, d, d)                     # output projection
    return cost


def _layer_contexts(config, n):
    """Per-layer effective key context (windowed layers see min(W, n) keys)."""
    mask = config.mask_spec()
    ctxs = []
    for i in range(config.depth):
        if mask is None:
            ctxs.append(n)
        else:
            eff = mask.for_layer(i)
            if eff.kind == "causal_window":
                ctxs.append(min(eff.window_size, n))
            else:
                ctxs.append(n)
    return ctxs


def count_flops(config, n_tokens=None):
    """Analytical forward FLOPs per single item (image or sequence).

    For causal LMs the report also carries flops_per_token_train, the
    standard training estimator 6*(params - input embedding) +
    12*depth*width*mean_ctx used for compute summaries.
    """
    n = n_tokens if n_tokens is not None else config.num_tokens
    d, r = config.width, config.mlp_ratio
    masked = config.family == "causal_lm"
    ctxs = _layer_contexts(config, n)

    embed = norms = attn = mlp = head = 0
    if config.family == "vit":
        embed += _linear_flops(config.grid * config.grid, config.patch_dim, d)
        embed += n * d  # position add
    for ctx in ctxs:
        norms += 2 * LN_OPS * n * d
        attn += _attn_flops(config, n, ctx, masked)
        mlp += _linear_flops(n, d, r * d) + GELU_OPS * n * r * d + _linear_flops(n, r * d, d)
    norms += LN_OPS * n * d
    if config.family == "vit":
        head += _linear_flops(1, d, config.num_classes)
    else:
        head += _linear_flops(n, d, config.vocab_size)

    report = count_params(config)
    report.flops_forward = embed + norms + attn + mlp + head
    report.breakdown.update({"flops_embed": embed, "flops_norm": norms,
                             "flops_attn": attn, "flops_mlp": mlp, "flops_head": head})
    if config.family == "causal_lm":
        embed_params = config.vocab_size * d
        mean_ctx = sum(ctxs) / len(ctxs)
        report.flops_per_token_train = int(
            6 * (report.total_params - embed_params) + 12 * config.depth * d * mean_ctx)
    return report
