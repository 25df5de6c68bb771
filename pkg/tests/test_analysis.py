import numpy as np
import pytest

from gka import analysis as an
from gka.errors import GkaError, ParameterError
from gka.kernel_attention import AttentionCapture, BandwidthParams

from oracles import rollout_loops


def make_capture(rng, layers, heads, n, identity=False, uniform=False):
    cap = AttentionCapture()
    for l in range(layers):
        for h in range(heads):
            if identity:
                w = np.eye(n)
            elif uniform:
                w = np.full((n, n), 1.0 / n)
            else:
                raw = rng.uniform(0.01, 1.0, (n, n))
                w = raw / raw.sum(axis=1, keepdims=True)
            cap.record(l, h, w)
    return cap


def test_rollout_config_validation():
    with pytest.raises(ParameterError):
        an.RolloutConfig(discard_ratios=(0.5, 0.0))
    with pytest.raises(ParameterError):
        an.RolloutConfig(discard_ratios=(1.0,))


def test_rollout_uniform_single_layer_closed_form():
    n = 17  # 4x4 grid + CLS
    cap = make_capture(None, 1, 2, n, uniform=True)
    grids = an.attention_rollout(cap, an.RolloutConfig(discard_ratios=(0.0,)))
    assert np.abs(grids[0.0] - 0.5 / n).max() <= 1e-12


def test_rollout_identity_all_layers_zero_cls_heat():
    cap = make_capture(None, 3, 2, 10, identity=True)
    grids = an.attention_rollout(cap, an.RolloutConfig(discard_ratios=(0.0, 0.5)))
    for grid in grids.values():
        assert np.abs(grid).max() == 0.0


def test_rollout_matches_matrix_product_oracle():
    rng = np.random.default_rng(0)
    layers, heads, n = 3, 2, 17
    cap = make_capture(rng, layers, heads, n)
    ratios = (0.0, 0.5, 0.9)
    got = an.attention_rollout(cap, an.RolloutConfig(discard_ratios=ratios))
    mats = [an.head_average(cap, l) for l in range(layers)]
    want = rollout_loops(mats, ratios)
    for r in ratios:
        assert np.abs(got[r] - want[r][0, 1:].reshape(4, 4)).max() <= 1e-8


def test_rollout_ratio_zero_bitwise_equals_unthresholded():
    rng = np.random.default_rng(1)
    cap = make_capture(rng, 2, 3, 10)
    a = an.attention_rollout(cap, an.RolloutConfig(discard_ratios=(0.0,)))[0.0]
    rolled = None
    for l in range(2):
        ahat = 0.5 * an.head_average(cap, l) + 0.5 * np.eye(10)
        ahat = ahat / ahat.sum(axis=1, keepdims=True)
        rolled = ahat if rolled is None else ahat @ rolled
    assert np.array_equal(a, rolled[0, 1:].reshape(3, 3))


def test_rollout_intermediates_row_stochastic():
    rng = np.random.default_rng(2)
    cap = make_capture(rng, 4, 2, 17)
    for ratio in (0.0, 0.5, 0.9):
        rolled = None
        for l in range(4):
            ahat = an._residual_mix(an.head_average(cap, l), ratio, 0.5)
            assert np.abs(ahat.sum(axis=1) - 1.0).max() <= 1e-6
            rolled = ahat if rolled is None else ahat @ rolled
            assert np.abs(rolled.sum(axis=1) - 1.0).max() <= 1e-6


def test_rollout_missing_layer_errors():
    cap = AttentionCapture()
    cap.record(0, 0, np.eye(5))
    cap.record(2, 0, np.eye(5))
    with pytest.raises(GkaError, match="missing"):
        an.attention_rollout(cap)
    with pytest.raises(GkaError):
        an.attention_rollout(AttentionCapture())


def test_cls_map_slice_and_shape():
    rng = np.random.default_rng(3)
    cap = make_capture(rng, 2, 3, 10)
    grid = an.cls_attention_map(cap, 1, 2)
    w = cap.weights(1, 2)
    assert grid.shape == (3, 3)
    assert np.array_equal(grid, w[0, 1:].reshape(3, 3))
    assert (grid >= 0).all() and grid.sum() <= 1.0 + 1e-9


def test_cls_map_grid_side_for_ti_geometry():
    # 224/16 grid: 197 tokens -> 14x14 map
    cap = AttentionCapture()
    cap.record(0, 0, np.full((197, 197), 1.0 / 197))
    assert an.cls_attention_map(cap, 0, 0).shape == (14, 14)


def test_patch_query_coords_p14():
    assert an.patch_query_coords(14) == [(3, 3), (7, 7), (10, 10), (3, 10)]


def test_patch_maps_slice_oracle():
    rng = np.random.default_rng(4)
    cap = make_capture(rng, 1, 2, 17)
    grids, coords = an.patch_attention_maps(cap, 0)
    avg = an.head_average(cap, 0)
    assert coords == [(1, 1), (2, 2), (3, 3), (1, 3)]
    for grid, (r, c) in zip(grids, coords):
        q = 1 + r * 4 + c
        assert np.array_equal(grid, avg[q, 1:].reshape(4, 4))
        assert grid.sum() <= 1.0 + 1e-9


def test_sigma_report_and_roundtrip(tmp_path):
    log_sigma = np.zeros((3, 2))
    table = an.sigma_report(BandwidthParams(log_sigma))
    assert np.array_equal(table, np.ones((3, 2)))  # fresh init -> sigma 1
    log_sigma = np.log(np.array([[0.5, 2.0], [1.25, 3.5], [0.125, 8.0]]))
    table = an.sigma_report(BandwidthParams(log_sigma))
    assert np.abs(table - np.exp(log_sigma)).max() <= 1e-7
    path = tmp_path / "sigma.csv"
    an.write_csv_matrix(path, table)
    back = an.read_csv_matrix(path)
    assert np.abs(back - table).max() <= np.abs(table).max() * 1e-6  # 6+ sig digits


def test_subsample_indices():
    assert np.array_equal(an.subsample_indices(40, 50), np.arange(40))
    idx = an.subsample_indices(197, 50)
    want = np.round(np.linspace(0, 196, 50)).astype(int)
    assert np.array_equal(idx, want)


def test_raw_matrix_export_diagonal_and_subsample():
    rng = np.random.default_rng(5)
    cap = make_capture(rng, 1, 1, 60)
    mat, idx = an.raw_matrix_export(cap, 0, 0, mask_diagonal=True, max_tokens=50)
    assert mat.shape == (50, 50)
    assert np.array_equal(np.diag(mat), np.zeros(50))
    full, idx2 = an.raw_matrix_export(cap, 0, 0, mask_diagonal=False, max_tokens=100)
    assert full.shape == (60, 60)
    assert np.array_equal(full, cap.weights(0, 0))


def test_kernel_evolution_consistent_with_cls_maps():
    rng = np.random.default_rng(6)
    cap = make_capture(rng, 3, 2, 10)
    rows = an.kernel_evolution_export(cap)
    assert len(rows) == 3
    for row in rows:
        avg = an.head_average(cap, row["layer"])
        assert np.array_equal(row["full"], avg)
        assert np.array_equal(row["cls"], avg[0, 1:].reshape(3, 3))
        assert np.array_equal(row["cls"], row["cls_overlay"])
    with pytest.raises(GkaError):
        an.kernel_evolution_export(AttentionCapture())


def test_pgm_writer(tmp_path):
    mat = np.array([[0.0, 0.5], [0.75, 1.0]])
    path = tmp_path / "img.pgm"
    an.write_pgm(path, mat)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n2 2\n255\n")
    assert list(blob[-4:]) == [0, 128, 191, 255]
    an.write_pgm(path, np.ones((2, 2)))  # constant image must not divide by zero
    assert path.read_bytes()[-4:] == bytes(4)


def test_export_run_tree_and_purity(tmp_path):
    rng = np.random.default_rng(7)
    cap = make_capture(rng, 2, 2, 17)
    bw = BandwidthParams(np.zeros((2, 2)))
    d1, d2 = tmp_path / "a", tmp_path / "b"
    files1 = an.export_run(d1, cap, bw)
    files2 = an.export_run(d2, cap, bw)
    assert files1 == files2
    expected = {"rollout_r0.csv", "rollout_r0.5.csv", "rollout_r0.9.csv",
                "cls_L0_H0.csv", "cls_L1_H1.csv", "patch_L0_q0.csv", "patch_L1_q3.csv",
                "sigma.csv", "sigma_series.csv", "raw_L0_H0.csv", "evo_L1_full.csv",
                "evo_L0_cls.csv"}
    assert expected <= set(files1)
    for name in files1:
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
    grids = {name: an.read_csv_matrix(d1 / name) for name in files1 if name.endswith(".csv")
             and not name.startswith("sigma_series")}
    for name, grid in grids.items():
        if name.startswith(("rollout", "cls", "patch", "raw", "evo")):
            assert (grid >= 0).all(), name
