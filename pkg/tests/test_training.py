import math

import numpy as np
import pytest

from gka import training as tr
from gka.errors import InputError, NumericError, ParameterError
from gka.model import build_model, preset


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_zero_grad_no_decay_keeps_params():
    params = {"w": np.ones((2, 2)), "b": np.zeros(3)}
    opt = tr.AdamW(params, tr.AdamWConfig(lr=0.1, weight_decay=0.0))
    opt.step(params, {"w": np.zeros((2, 2)), "b": np.zeros(3)})
    assert np.array_equal(params["w"], np.ones((2, 2)))


def test_adamw_first_step_closed_form():
    g = np.array([0.3, -2.0, 0.001])
    params = {"w": np.zeros(3)}
    cfg = tr.AdamWConfig(lr=0.05, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    opt = tr.AdamW(params, cfg)
    opt.step(params, {"w": g.copy()})
    want = -cfg.lr * g / (np.abs(g) + cfg.eps)  # mhat/sqrt(vhat) = g/|g| at t=1
    assert np.abs(params["w"] - want).max() <= 1e-12


def test_adamw_decay_exemption():
    params = {"log_sigma": np.ones(2), "w_o": np.ones((2, 2))}
    opt = tr.AdamW(params, tr.AdamWConfig(lr=0.1, weight_decay=0.5), exempt={"log_sigma"})
    opt.step(params, {"log_sigma": np.zeros(2), "w_o": np.zeros((2, 2))})
    assert np.array_equal(params["log_sigma"], np.ones(2))
    assert (params["w_o"] < 1.0).all()


def test_adamw_nan_grad_aborts():
    params = {"w": np.zeros(2)}
    opt = tr.AdamW(params, tr.AdamWConfig())
    with pytest.raises(NumericError, match="w"):
        opt.step(params, {"w": np.array([1.0, np.nan])})


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = tr.clip_global_norm(grads, 1.0)
    assert abs(norm - 5.0) <= 1e-12
    total = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    assert abs(total - 1.0) <= 1e-12


# ---------------------------------------------------------------------------
# losses / metrics


def test_cross_entropy_uniform_is_log_v():
    logits = np.zeros((2, 3, 7))
    targets = np.zeros((2, 3), dtype=int)
    loss, _ = tr.cross_entropy(logits, targets)
    assert abs(loss - math.log(7)) <= 1e-12


def test_cross_entropy_perfect_margin():
    v = 16
    targets = np.arange(4) % v
    logits = np.zeros((4, v))
    logits[np.arange(4), targets] = 30.0
    loss, _ = tr.cross_entropy(logits, targets)
    assert loss <= 1e-9


def test_cross_entropy_grad_matches_fd():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 3, 5))
    targets = rng.integers(0, 5, size=(2, 3))
    targets[0, 0] = -1  # ignored position
    _, grad = tr.cross_entropy(logits, targets)
    h = 1e-6
    flat = logits.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = tr.cross_entropy(logits, targets)[0]
        flat[i] = orig - h
        down = tr.cross_entropy(logits, targets)[0]
        flat[i] = orig
        assert abs((up - down) / (2 * h) - gflat[i]) <= 1e-6


def test_cross_entropy_target_out_of_range():
    with pytest.raises(InputError):
        tr.cross_entropy(np.zeros((1, 3)), np.array([3]))


def test_bits_per_byte():
    assert abs(tr.bits_per_byte(math.log(2), 1) - 1.0) <= 1e-12
    assert abs(tr.bits_per_byte(2 * math.log(2), 1) - 2.0) <= 1e-12  # linear in loss
    with pytest.raises(ParameterError):
        tr.bits_per_byte(1.0, 0)


def test_bpb_equals_per_token_nats_over_ln2():
    # byte-tokenized toy corpus: one token per byte
    n_tokens = 50
    mean_nats = 1.37
    assert abs(tr.bits_per_byte(mean_nats * n_tokens, n_tokens)
               - mean_nats / math.log(2)) <= 1e-12


# ---------------------------------------------------------------------------
# task generators


def test_cluster_regression_deterministic_and_targets():
    spec = tr.TaskSpec(kind="cluster_regression", seed=5, batch=3, clusters=2,
                       tokens_per_cluster=4, dim=3)
    t1, y1 = tr.gen_cluster_regression(spec)
    t2, y2 = tr.gen_cluster_regression(spec)
    assert np.array_equal(t1, t2) and np.array_equal(y1, y2)
    assert t1.shape == (3, 8, 3)
    # targets are within-sequence cluster means
    first_cluster = t1[0, :4]
    assert np.abs(y1[0, :4] - first_cluster.mean(axis=0)).max() <= 1e-12


def test_cluster_regression_single_cluster_global_mean():
    spec = tr.TaskSpec(kind="cluster_regression", seed=1, batch=2, clusters=1,
                       tokens_per_cluster=6, dim=4)
    tokens, targets = tr.gen_cluster_regression(spec)
    assert np.abs(targets[0] - tokens[0].mean(axis=0)).max() <= 1e-12


def test_regressor_flat_sigma_predicts_global_mean():
    spec = tr.TaskSpec(kind="cluster_regression", seed=2, batch=2, clusters=3,
                       tokens_per_cluster=4, dim=4)
    tokens, targets = tr.gen_cluster_regression(spec)
    model = tr.GkaRegressor(dim=4, heads=1, log_sigma_init=np.log(1e6))
    pred, _ = model.forward(tokens)
    assert np.abs(pred - tokens.mean(axis=1, keepdims=True)).max() <= 1e-3
    assert tr.mse_loss(pred, targets)[0] > 1.0  # >= 2 clusters: mean is a bad fit


def test_regressor_sharp_sigma_near_cluster_means():
    spec = tr.TaskSpec(kind="cluster_regression", seed=3, batch=4, clusters=4,
                       tokens_per_cluster=8, dim=8, center_scale=10.0, spread=0.1)
    tokens, targets = tr.gen_cluster_regression(spec)
    model = tr.GkaRegressor(dim=8, heads=1, log_sigma_init=0.0)  # sigma 1
    pred, _ = model.forward(tokens)
    rel = np.linalg.norm(pred - targets, axis=-1) / np.linalg.norm(targets, axis=-1)
    assert rel.max() <= 0.10


def test_copy_task_structure():
    spec = tr.TaskSpec(kind="copy_lm", seed=4, batch=5, vocab=16, prefix_len=8)
    a = tr.gen_copy_lm(spec)
    b = tr.gen_copy_lm(spec)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    inputs, targets, answers = a
    assert inputs.shape == (5, 16) and targets.shape == (5, 16)
    # delimiter at position 8; second copy repeats the first
    assert (inputs[:, 8] == 0).all()
    assert np.array_equal(inputs[:, 9:], inputs[:, :7])
    assert np.array_equal(targets[:, 8:], inputs[:, :8])
    assert answers[:, 8:].all() and not answers[:, :8].any()
    # distinct prefix tokens: every answer has a unique correct token
    for row in inputs[:, :8]:
        assert len(set(row.tolist())) == 8 and 0 not in row


def test_copy_task_random_baseline():
    spec = tr.TaskSpec(kind="copy_lm", seed=6, batch=64, vocab=16, prefix_len=8)
    inputs, targets, answers = tr.gen_copy_lm(spec)
    rng = np.random.default_rng(0)
    guesses = rng.integers(0, 16, size=targets.shape)
    acc = (guesses == targets)[answers].mean()
    assert acc <= 2.0 / 16


# ---------------------------------------------------------------------------
# training loop


def test_train_loop_lr_zero_constant_loss():
    spec = tr.TaskSpec(kind="cluster_regression", seed=0, batch=2, clusters=2,
                       tokens_per_cluster=4, dim=4)
    model = tr.GkaRegressor(dim=4, heads=1, log_sigma_init=1.0)
    trace = tr.train_loop(model, spec, steps=5, opt_config=tr.AdamWConfig(lr=0.0),
                          seed=0, log_every=1)
    losses = {row["loss"] for row in trace}
    assert len(losses) == 1


def test_train_loop_deterministic_trace(tmp_path):
    cfg = preset("gka-lm-toy")
    spec = tr.TaskSpec(kind="copy_lm", seed=0, batch=8, vocab=16, prefix_len=4)
    paths = []
    for run in range(2):
        model = build_model(cfg, seed=1)
        path = tmp_path / f"metrics{run}.csv"
        tr.train_loop(model, spec, steps=12, opt_config=tr.AdamWConfig(lr=1e-3),
                      seed=7, log_every=4, csv_path=path)
        paths.append(path.read_bytes())
    assert paths[0] == paths[1]


def test_train_loop_csv_schema(tmp_path):
    cfg = preset("gka-lm-toy")
    model = build_model(cfg, seed=0)
    spec = tr.TaskSpec(kind="copy_lm", seed=0, batch=4, vocab=16, prefix_len=4)
    path = tmp_path / "metrics.csv"
    tr.train_loop(model, spec, steps=3, opt_config=tr.AdamWConfig(lr=1e-3),
                  seed=0, log_every=1, csv_path=path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:4] == ["step", "loss", "accuracy", "bpb"]
    assert header[4:] == [f"sigma_L{l}_H{h}" for l in range(2) for h in range(4)]


def test_sigma_learns_on_cluster_regression():
    spec = tr.TaskSpec(kind="cluster_regression", seed=3, batch=8, clusters=4,
                       tokens_per_cluster=8, dim=8, center_scale=10.0, spread=0.1)
    model = tr.GkaRegressor(dim=8, heads=1, log_sigma_init=np.log(8.0))
    trace = tr.train_loop(model, spec, steps=100,
                          opt_config=tr.AdamWConfig(lr=0.02, weight_decay=0.0),
                          seed=0, log_every=1)
    losses = [row["loss"] for row in trace]
    assert all(b < a for a, b in zip(losses, losses[1:]))  # strictly decreasing
    sigma0, sigma1 = trace[0]["sigma_L0_H0"], trace[-1]["sigma_L0_H0"]
    assert abs(sigma1 - sigma0) > 0.0


# ---------------------------------------------------------------------------
# gradient-check harness


def test_grad_check_linear_layer_tight():
    rng = np.random.default_rng(1)
    tensors = {"w": rng.standard_normal((4, 3)), "x": rng.standard_normal((2, 4))}

    def loss_fn():
        return float(((tensors["x"] @ tensors["w"]) ** 2).sum())

    out = tensors["x"] @ tensors["w"]
    analytic = {"w": 2 * tensors["x"].T @ out, "x": 2 * out @ tensors["w"].T}
    report = tr.finite_difference_check(loss_fn, tensors, analytic, tolerance=1e-8)
    assert report.passed


def test_grad_check_negative_control_fails():
    report = tr.check_gka_op(seed=0, corrupt=True)
    assert not report.passed
    assert report.worst == "log_sigma"


def test_grad_check_cli_targets():
    for target in ("gka", "mha", "vlt"):
        assert tr.grad_check(target, seed=0).passed
    with pytest.raises(ParameterError):
        tr.grad_check("bogus")
