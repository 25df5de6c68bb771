import json
import subprocess
import sys

import numpy as np

from gka.cli import main
from gka.model import CostReport


def run_cli(*args):
    return main(list(args))


def test_count_json_roundtrip(capsys):
    assert run_cli("count", "--preset", "gka-ti", "--json") == 0
    out = capsys.readouterr().out
    report = CostReport.from_dict(json.loads(out))
    assert report.sigma_params == 36
    assert report.total_params == 4381132


def test_count_table_output(capsys):
    assert run_cli("count", "--preset", "vlt-ti") == 0
    out = capsys.readouterr().out
    assert "total params" in out and "5,265,832" in out


def test_count_unknown_preset_lists_names(capsys):
    assert run_cli("count", "--preset", "nope") == 2
    err = capsys.readouterr().err
    assert "gka-ti" in err and "deit-b" in err


def test_count_config_file(tmp_path, capsys):
    from gka.model import preset, save_config

    path = tmp_path / "m.cfg"
    save_config(preset("gka-s"), path)
    assert run_cli("count", "--config", str(path), "--json") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["sigma_params"] == 72


def test_count_writes_manifest_and_report(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli("count", "--preset", "gka-ti", "--out", str(out)) == 0
    capsys.readouterr()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "count"
    assert manifest["config"] == "gka-ti"
    assert "timestamp" in manifest and "precision" in manifest
    assert json.loads((out / "report.json").read_text())["sigma_params"] == 36


def test_bench_smoke_and_workspace_columns(tmp_path, capsys):
    out = tmp_path / "bench"
    code = run_cli("bench", "--preset", "gka-vit-toy", "--seq-lens", "32,64",
                   "--tiles", "16x16", "--passes", "2", "--warmup", "1",
                   "--out", str(out))
    assert code == 0
    table = capsys.readouterr().out
    assert "streaming" in table and "naive" in table
    rows = json.loads((out / "bench.json").read_text())
    naive = {r["n"]: r["workspace_floats"] for r in rows if r["path"] == "naive"}
    stream = {r["n"]: r["workspace_floats"] for r in rows if r["path"] == "streaming"}
    assert naive[64] == 4 * naive[32]  # dense N^2 buffer growth
    assert stream[64] <= stream[32] * 1.01  # tiled workspace flat in N


def test_gradcheck_command(capsys):
    assert run_cli("gradcheck", "--target", "gka", "--seed", "1") == 0
    assert "PASS" in capsys.readouterr().out


def test_train_cluster_regression(tmp_path, capsys):
    out = tmp_path / "reg"
    code = run_cli("train", "--task", "cluster_regression", "--preset", "gka-vit-toy",
                   "--steps", "30", "--log-sigma-init", "2.0", "--lr", "0.05",
                   "--out", str(out))
    assert code == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("step,loss,accuracy,bpb,sigma_L0_H0")
    assert (out / "manifest.json").exists()


def test_train_copy_lm_deterministic(tmp_path):
    outs = []
    for run in range(2):
        out = tmp_path / f"lm{run}"
        code = run_cli("train", "--task", "copy_lm", "--preset", "gka-lm-toy",
                       "--steps", "8", "--batch", "4", "--seed", "11",
                       "--out", str(out))
        assert code == 0
        outs.append((out / "metrics.csv").read_bytes())
        assert (out / "ckpt.bin").exists() and (out / "ckpt.idx").exists()
    assert outs[0] == outs[1]


def test_train_task_config_mismatch(capsys):
    assert run_cli("train", "--task", "copy_lm", "--preset", "gka-vit-toy",
                   "--steps", "1") == 2


def test_train_nan_exits_numeric_code(tmp_path, capsys):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        code = run_cli("train", "--task", "copy_lm", "--steps", "40", "--batch", "4",
                       "--lr", "1e8", "--no-clip", "--out", str(tmp_path / "nan"))
    assert code == 3
    assert "NaN loss" in capsys.readouterr().err


def test_default_out_dir_env_var(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GKA_OUT_DIR", str(tmp_path / "envroot"))
    assert run_cli("train", "--task", "cluster_regression", "--steps", "3",
                   "--lr", "0.01") == 0
    assert (tmp_path / "envroot" / "train" / "metrics.csv").exists()


def test_visualize_pipeline(tmp_path, capsys):
    train_out = tmp_path / "train"
    assert run_cli("train", "--task", "cluster_classify", "--preset", "gka-vit-toy",
                   "--steps", "20", "--batch", "8", "--out", str(train_out)) == 0
    viz_out = tmp_path / "viz"
    assert run_cli("visualize", "--checkpoint", str(train_out / "ckpt"),
                   "--input", str(train_out / "viz_input.npy"),
                   "--out", str(viz_out)) == 0
    names = {p.name for p in viz_out.iterdir()}
    cfg_layers, cfg_heads = 2, 2
    for l in range(cfg_layers):
        for h in range(cfg_heads):
            assert f"cls_L{l}_H{h}.csv" in names
            assert f"raw_L{l}_H{h}.csv" in names
            assert f"cls_L{l}_H{h}.pgm" in names
        for q in range(4):
            assert f"patch_L{l}_q{q}.csv" in names
        assert f"evo_L{l}_full.csv" in names and f"evo_L{l}_cls.csv" in names
    for r in ("0", "0.5", "0.9"):
        assert f"rollout_r{r}.csv" in names
    assert {"sigma.csv", "sigma_series.csv", "input.pgm", "manifest.json"} <= names

    # rollout r=0 equals the unthresholded oracle recomputed from a fresh capture
    from gka.analysis import read_csv_matrix
    from gka.checkpoint import load_checkpoint
    from gka.kernel_attention import AttentionCapture
    from gka.model import build_model

    params, cfg, _ = load_checkpoint(train_out / "ckpt")
    model = build_model(cfg, seed=0, dtype=params["norm.gamma"].dtype)
    model.params = params
    cap = AttentionCapture()
    model.forward(np.load(train_out / "viz_input.npy"), capture=cap)
    rolled = None
    n = cfg.num_tokens
    for l in range(cfg.depth):
        avg = np.mean([cap.weights(l, h) for h in range(cfg.heads)], axis=0)
        ahat = 0.5 * avg + 0.5 * np.eye(n)
        ahat /= ahat.sum(axis=1, keepdims=True)
        rolled = ahat if rolled is None else ahat @ rolled
    want = rolled[0, 1:].reshape(4, 4)
    got = read_csv_matrix(viz_out / "rollout_r0.csv")
    assert np.abs(got - want).max() <= 1e-6


def test_visualize_missing_checkpoint(tmp_path, capsys):
    dummy = tmp_path / "in.npy"
    np.save(dummy, np.zeros((1, 4, 64), dtype=np.float32))
    assert run_cli("visualize", "--checkpoint", str(tmp_path / "none"),
                   "--input", str(dummy)) == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_cli_subprocess_entrypoint():
    proc = subprocess.run([sys.executable, "-m", "gka.cli", "count", "--preset",
                           "gka-ti", "--json", "--threads", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["sigma_params"] == 36
