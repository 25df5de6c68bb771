"""Single CLI entry point: counters, benchmarks, gradient checks, toy
training, analysis exports.

Exit codes: 0 success, 2 config error, 3 numeric failure (NaN/degenerate
row), 4 self-test/acceptance-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from .errors import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_SELFTEST = 4

OUT_ENV_VAR = "GKA_OUT_DIR"


class SelfTestFailure(Exception):
    pass


def _cap_threads(argv):
    """Apply --threads to the BLAS pools; must run before numpy is imported."""
    if "numpy" in sys.modules:
        return
    threads = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(int(threads))


def _default_out(command):
    root = os.environ.get(OUT_ENV_VAR, "out")
    return str(Path(root) / command)


def _write_manifest(outdir, args, extra=None):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "config": getattr(args, "config", None) or getattr(args, "preset", None),
        "seed": getattr(args, "seed", None),
        "out": str(outdir),
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "precision": getattr(args, "precision", "single"),
        "argv": sys.argv[1:],
    }
    manifest.update(extra or {})
    with open(outdir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return outdir


def _resolve_config(args):
    from .model import load_config, preset

    if getattr(args, "config", None):
        return load_config(args.config)
    return preset(args.preset)


def _dtype(args):
    from .numerics import resolve_dtype

    return resolve_dtype(getattr(args, "precision", "single"))


# ---------------------------------------------------------------------------
# count


def cmd_count(args):
    from .model import count_flops

    config = _resolve_config(args)
    report = count_flops(config)
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        name = args.preset or args.config
        print(f"cost report for {name} ({config.family}, {config.attention_kind})")
        print(f"  total params     {report.total_params:>14,}")
        print(f"  attn params      {report.attn_params:>14,}")
        print(f"  mlp params       {report.mlp_params:>14,}")
        print(f"  sigma params     {report.sigma_params:>14,}")
        print(f"  forward flops    {report.flops_forward:>14,}")
        if config.family == "causal_lm":
            print(f"  train flops/tok  {report.flops_per_token_train:>14,}")
        for key in sorted(report.breakdown):
            print(f"    {key:<22} {report.breakdown[key]:>14,}")
        print(f"  convention: {report.convention}")
    if args.out:
        outdir = _write_manifest(args.out, args)
        with open(outdir / "report.json", "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# bench


def _bench_layer(config, dtype, seed):
    import numpy as np

    from .kernel_attention import GkaLayerParams, KERNEL_EPS_DOUBLE, KERNEL_EPS_SINGLE

    rng = np.random.default_rng(seed)
    d = config.width
    eps = KERNEL_EPS_DOUBLE if dtype == np.float64 else KERNEL_EPS_SINGLE
    params = GkaLayerParams(
        log_sigma=np.zeros(config.heads, dtype=dtype),
        w_o=(rng.standard_normal((d, d)) * 0.02).astype(dtype),
        b_o=np.zeros(d, dtype=dtype),
        epsilon=eps, use_rope=config.use_rope, unit_norm=config.unit_norm,
        rope_base=config.rope_base)
    return params


def cmd_bench(args):
    import numpy as np

    from .kernel_attention import gka_forward
    from .streaming import TileConfig, gka_forward_streaming

    config = _resolve_config(args)
    dtype = _dtype(args)
    rng = np.random.default_rng(args.seed)
    params = _bench_layer(config, dtype, args.seed)
    mask = config.mask_spec()
    tr, tc = (int(v) for v in args.tiles.split("x"))
    tiles = TileConfig(tile_rows=tr, tile_cols=tc)
    seq_lens = [int(v) for v in args.seq_lens.split(",")]
    paths = ["naive", "streaming"] if args.path == "both" else [args.path]
    tol = 1e-5 if dtype == np.float32 else 1e-10

    rows = []
    for n in seq_lens:
        x = (rng.standard_normal((args.batch, n, config.width))).astype(dtype)
        ref = gka_forward(x, params, mask)
        streamed, stats = gka_forward_streaming(x, params, mask, tiles=tiles)
        rel = float(np.abs(ref - streamed).max() / np.abs(ref).max())
        if rel > tol:
            raise SelfTestFailure(
                f"paths disagree before timing at N={n}: max rel diff {rel:.3e} > {tol}")
        for path in paths:
            if path == "naive":
                fn = lambda: gka_forward(x, params, mask)
                workspace = args.batch * config.heads * n * n  # dense kernel buffer
            else:
                fn = lambda: gka_forward_streaming(x, params, mask, tiles=tiles)[0]
                workspace = stats.peak_transient_floats
            for _ in range(args.warmup):
                fn()
            t0 = time.perf_counter()
            for _ in range(args.passes):
                fn()
            dt = (time.perf_counter() - t0) / args.passes
            tokens_per_s = args.batch * n / dt
            rows.append((n, path, tokens_per_s, workspace))

    print(f"{'N':>6} {'path':<10} {'tokens/s':>12} {'workspace_floats':>18}")
    for n, path, tps, ws in rows:
        print(f"{n:>6} {path:<10} {tps:>12.1f} {ws:>18,}")
    if args.out:
        outdir = _write_manifest(args.out, args)
        with open(outdir / "bench.json", "w") as f:
            json.dump([{"n": n, "path": p, "tokens_per_s": t, "workspace_floats": int(w)}
                       for n, p, t, w in rows], f, indent=2)


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    from .training import grad_check

    targets = ["gka", "gka-lm", "mha", "vlt", "block", "model"] if args.target == "all" \
        else [args.target]
    failed = []
    for target in targets:
        report = grad_check(target, seed=args.seed, tolerance=args.tolerance)
        status = "PASS" if report.passed else "FAIL"
        print(f"gradcheck {target:<8} max rel err {report.max_rel_err:.3e} "
              f"(worst: {report.worst})  {status}")
        if not report.passed:
            failed.append(target)
    if args.out:
        _write_manifest(args.out, args, {"failed": failed})
    if failed:
        raise SelfTestFailure(f"gradient checks failed: {failed}")


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    import numpy as np

    from .checkpoint import save_checkpoint
    from .model import build_model
    from .training import AdamWConfig, GkaRegressor, TaskSpec, gen_cluster_classify, train_loop

    dtype = _dtype(args)
    outdir = Path(args.out or _default_out("train"))
    outdir.mkdir(parents=True, exist_ok=True)

    config = None
    if args.task == "cluster_regression":
        task = TaskSpec(kind="cluster_regression", seed=args.seed, batch=args.batch,
                        dim=args.task_dim, spread=args.spread)
        model = GkaRegressor(dim=args.task_dim, heads=1, log_sigma_init=args.log_sigma_init,
                             dtype=dtype)
    else:
        if not args.preset and not args.config:
            args.preset = {"copy_lm": "gka-lm-toy", "cluster_classify": "gka-vit-toy"}[args.task]
        config = _resolve_config(args)
        if args.task == "copy_lm":
            if config.family != "causal_lm":
                raise ConfigError("copy_lm requires a causal_lm config")
            task = TaskSpec(kind="copy_lm", seed=args.seed, batch=args.batch,
                            vocab=config.vocab_size,
                            prefix_len=min(args.prefix_len, (config.seq_len - 1) // 2))
        else:
            if config.family != "vit":
                raise ConfigError("cluster_classify requires a vit config")
            task = TaskSpec(kind="cluster_classify", seed=args.seed, batch=args.batch,
                            clusters=config.num_classes, grid=config.grid,
                            patch_dim=config.patch_dim, spread=args.spread)
        model = build_model(config, seed=args.seed, dtype=dtype)

    opt = AdamWConfig(lr=args.lr, weight_decay=args.weight_decay,
                      clip_norm=None if args.no_clip else 1.0)
    trace = train_loop(model, task, steps=args.steps, opt_config=opt, seed=args.seed,
                       log_every=args.log_every, csv_path=outdir / "metrics.csv")
    final = trace[-1]
    print(f"trained {args.task} for {args.steps} steps: "
          f"loss {final['loss']:.6g} accuracy {final['accuracy']:.4g}")

    if args.task != "cluster_regression":
        save_checkpoint(outdir / "ckpt", model.params, config,
                        meta={"task": args.task, "steps": args.steps, "seed": args.seed})
        if args.task == "cluster_classify":
            sample_rng = np.random.default_rng(args.seed + 1)
            patches, labels = gen_cluster_classify(task, sample_rng)
            np.save(outdir / "viz_input.npy", patches[:1].astype(dtype))
            with open(outdir / "viz_label.txt", "w") as f:
                f.write(str(int(labels[0])) + "\n")
    _write_manifest(outdir, args, {"final": {k: str(v) for k, v in final.items()}})


# ---------------------------------------------------------------------------
# visualize


def cmd_visualize(args):
    import numpy as np

    from .analysis import RolloutConfig, export_run, write_pgm
    from .checkpoint import load_checkpoint
    from .kernel_attention import AttentionCapture
    from .model import build_model, collect_log_sigma

    params, config, meta = load_checkpoint(args.checkpoint)
    if config.family != "vit":
        raise ConfigError("visualize requires a vit-family checkpoint (CLS + patch grid)")
    dtype = next(iter(params.values())).dtype
    model = build_model(config, seed=0, dtype=dtype)
    model.params = params
    inputs = np.load(args.input)
    capture = AttentionCapture(batch_index=0, store_kernel=False)
    model.forward(inputs, train_mode=False, capture=capture)

    ratios = tuple(float(r) for r in args.discard_ratios.split(","))
    outdir = Path(args.out or _default_out("visualize"))
    written = export_run(outdir, capture, collect_log_sigma(params, config.depth),
                         rollout_cfg=RolloutConfig(discard_ratios=ratios),
                         max_tokens=args.max_tokens)

    # Reconstructed grayscale input for the renderer's overlay figures.
    if inputs.ndim == 3:
        p, g = config.patch_size, config.grid
        img = inputs[0].reshape(g, g, config.in_channels, p, p).mean(axis=2)
        img = img.transpose(0, 2, 1, 3).reshape(g * p, g * p)
    else:
        img = inputs[0].mean(axis=0)
    write_pgm(outdir / "input.pgm", img)
    written.append("input.pgm")
    _write_manifest(outdir, args, {"files": sorted(written)})
    print(f"wrote {len(written)} analysis files to {outdir}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="gka", description=__doc__)
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (applied before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--preset", default=None)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--precision", choices=["single", "double"], default="single")
        p.add_argument("--out", default=out_default)
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS worker threads (applied before numpy loads)")

    p = sub.add_parser("count", help="parameter/FLOP cost report")
    common(p)
    p.add_argument("--json", action="store_true", help="machine-readable report")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("bench", help="naive vs streaming throughput and workspace")
    common(p)
    p.add_argument("--seq-lens", default="128,256")
    p.add_argument("--path", choices=["naive", "streaming", "both"], default="both")
    p.add_argument("--tiles", default="64x64")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--passes", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference certification")
    common(p)
    p.add_argument("--target", default="all",
                   choices=["all", "gka", "gka-lm", "mha", "vlt", "block", "model"])
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="toy training runs")
    common(p)
    p.add_argument("--task", required=True,
                   choices=["copy_lm", "cluster_regression", "cluster_classify"])
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--prefix-len", type=int, default=8)
    p.add_argument("--task-dim", type=int, default=8)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--log-sigma-init", type=float, default=0.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("visualize", help="analysis export tree from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint prefix (no extension)")
    p.add_argument("--input", required=True, help=".npy tokens/patches file")
    p.add_argument("--discard-ratios", default="0,0.5,0.9")
    p.add_argument("--max-tokens", type=int, default=50)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    _cap_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import DegenerateRowError, NumericError

    try:
        args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, DegenerateRowError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SelfTestFailure as exc:
        print(f"self-test failure: {exc}", file=sys.stderr)
        return EXIT_SELFTEST
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
