"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete. The end-to-end recovery test (criterion 4) trains
the full pipeline and takes several minutes.
"""

import json
import math
import time

import numpy as np
import pytest

from canopyhm import cli, enhance, evalmetrics, forestry, height_head
from canopyhm import numerics as nm
from canopyhm import raster, scenegen
from canopyhm.features import FeatureMap, LOW, read_features, write_features
from conftest import fd_gradients, max_rel_error


def _report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def _gradcheck_case(loss_fn, params, tol=1e-4):
    for p in params:
        p.grad[...] = 0.0
    nm.backward(loss_fn())
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.grad[...] = 0.0
    worst = 0.0
    for p, a in zip(params, analytic):
        num = fd_gradients(loss_fn, p)
        worst = max(worst, max_rel_error(a, num))
    return worst


# ---------------------------------------------------------------------------
# 1. Gradient oracle over every differentiable operation
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_oracle():
    t0 = time.time()
    worst = {}

    # conv2d: 20 seeded shape/stride/padding combinations
    worst_c = 0.0
    for case in range(20):
        rng = np.random.default_rng(1000 + case)
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.choice([0, 1, 2]))
        size = int(rng.integers(max(k, 4), 8))
        pad_mode = "edge" if case % 3 == 0 else "zero"
        x = nm.ParamTensor("x", rng.standard_normal((c_in, size, size)))
        w = nm.ParamTensor("w", rng.standard_normal((c_out, c_in, k, k)))
        b = nm.ParamTensor("b", rng.standard_normal(c_out))

        def loss_fn():
            return nm.sum_all(nm.square(nm.conv2d(x, w, bias=b, stride=stride,
                                                  padding=padding, pad_mode=pad_mode)))

        worst_c = max(worst_c, _gradcheck_case(loss_fn, [x, w, b]))
    worst["conv2d"] = worst_c

    # depthwise_conv: shared and per-channel kernels
    worst_c = 0.0
    for case in range(20):
        rng = np.random.default_rng(2000 + case)
        c = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.choice([0, k // 2])) if k > 1 else 0
        size = int(rng.integers(max(k, 4), 8))
        shared = case % 2 == 0
        pad_mode = "edge" if case % 3 == 0 else "zero"
        x = nm.ParamTensor("x", rng.standard_normal((c, size, size)))
        kern = nm.ParamTensor("k", rng.standard_normal((k, k) if shared else (c, k, k)))

        def loss_fn():
            return nm.sum_all(nm.square(nm.depthwise_conv(
                x, kern, stride=stride, padding=padding, pad_mode=pad_mode)))

        worst_c = max(worst_c, _gradcheck_case(loss_fn, [x, kern]))
    worst["depthwise_conv"] = worst_c

    # softmax over several axes, mixed with a random linear readout
    worst_c = 0.0
    for case in range(20):
        rng = np.random.default_rng(3000 + case)
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        axis = int(rng.integers(0, 3))
        x = nm.ParamTensor("x", rng.standard_normal(shape))
        readout = nm.constant(rng.standard_normal(shape))

        def loss_fn():
            return nm.sum_all(nm.mul(nm.softmax(x, axis=axis), readout))

        worst_c = max(worst_c, _gradcheck_case(loss_fn, [x]))
    worst["softmax"] = worst_c

    # elementwise family: 4 seeded cases per registered function
    worst_c = 0.0
    for i, fn in enumerate(("relu", "sigmoid", "exp", "log", "square")):
        for case in range(4):
            rng = np.random.default_rng(4000 + 10 * i + case)
            values = rng.standard_normal((3, 4))
            if fn == "log":
                values = np.abs(values) + 0.5
            elif fn == "relu":
                values = values + np.sign(values) * 0.05  # keep clear of the kink
            x = nm.ParamTensor("x", values)
            readout = nm.constant(rng.standard_normal((3, 4)))

            def loss_fn():
                return nm.sum_all(nm.mul(nm.elementwise(x, fn), readout))

            worst_c = max(worst_c, _gradcheck_case(loss_fn, [x]))
    worst["elementwise"] = worst_c

    # loss_rec through the full enhancer path (upsample, view transform,
    # downsample, uncertainty)
    worst_c = 0.0
    for case in range(20):
        rng = np.random.default_rng(5000 + case)
        params = enhance.EnhancerParams.initialize(
            channels=2, factors=(2,), k_up=3, c_mid=2,
            seed=int(rng.integers(2 ** 31)), dtype=np.float64)
        lf = nm.constant(rng.standard_normal((2, 3, 3)))
        flip_view = case % 2 == 0

        def loss_fn():
            hf = enhance.upsample_diff(params, lf)
            hf_t = nm.flip(hf, axis=-1) if flip_view else hf
            recon = enhance.downsample_diff(params, hf_t)
            target = nm.constant(np.flip(lf.values, axis=-1).copy()
                                 if flip_view else lf.values)
            s = enhance.uncertainty_diff(params, target)
            return enhance.loss_rec([target], [recon], [s])

        worst_c = max(worst_c, _gradcheck_case(loss_fn, params.all_params()))
    worst["loss_rec"] = worst_c

    # predict_height training loss (convs + batch norm + sigmoid + masked MSE)
    worst_c = 0.0
    for case in range(20):
        rng = np.random.default_rng(6000 + case)
        head = height_head.HeadParams.initialize(
            2, hidden1=4, hidden2=3, h_max=25.0,
            seed=int(rng.integers(2 ** 31)), dtype=np.float64)
        x = nm.constant(rng.standard_normal((2, 5, 5)))
        target = rng.uniform(0.1, 0.9, size=(5, 5))
        mask = (rng.uniform(size=(5, 5)) > 0.2).astype(np.float64)
        mask.flat[0] = 1.0  # never empty

        def loss_fn():
            return height_head.masked_head_loss(head, x, target, mask, training=True)

        worst_c = max(worst_c, _gradcheck_case(loss_fn, head.all_params()))
    worst["predict_height_loss"] = worst_c

    elapsed = time.time() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 120
    detail = ("gradients vs central differences (rel err, 20 cases each): "
              + ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
              + f"; runtime {elapsed:.1f}s < 120s")
    _report(1, ok, detail)


# ---------------------------------------------------------------------------
# 2. Consistency-loss fixed points and closed-form optimum
# ---------------------------------------------------------------------------


def test_criterion_2_loss_fixed_points():
    rng = np.random.default_rng(7)
    lf = rng.standard_normal((3, 5, 5))

    zero_unit = enhance.loss_rec([lf], [lf.copy()], [np.ones((5, 5))]).item()
    ok_zero = zero_unit == 0.0

    log_only = enhance.loss_rec([lf], [lf.copy()], [np.full((5, 5), np.e)]).item()
    ok_e = abs(log_only - 1.0) < 1e-12

    # closed form s* = |r|: scan s for a fixed residual
    r = 1.7
    grid = np.linspace(0.05, 5.0, 4000)
    losses = [enhance.loss_rec([np.zeros((1, 1, 1))], [np.full((1, 1, 1), r)],
                               [np.full((1, 1), s)]).item() for s in grid]
    s_best = float(grid[int(np.argmin(losses))])
    step = float(grid[1] - grid[0])
    ok_scan = abs(s_best - r) <= step + 1e-12

    ok = ok_zero and ok_e and ok_scan
    _report(2, ok, f"zero-residual losses: s=1 -> {zero_unit}, s=e -> {log_only:.12f}; "
                   f"1-D scan optimum s*={s_best:.4f} vs |r|={r} (grid step {step:.4f})")


# ---------------------------------------------------------------------------
# 3. Normalization invariants
# ---------------------------------------------------------------------------


def test_criterion_3_normalization_invariants():
    # 64-bit test mode: the tolerances are properties of the math, checked
    # at full precision
    rng = np.random.default_rng(8)

    kernel_dev = 0.0
    for _ in range(25):
        params = enhance.EnhancerParams.initialize(3, (7, 2), 5, 8, seed=0,
                                                   dtype=np.float64)
        params.down_logits.values[...] = rng.uniform(
            -50, 50, params.down_logits.values.shape)
        kern = enhance.down_kernel(params)
        assert np.all(kern >= 0)
        kernel_dev = max(kernel_dev, abs(float(kern.sum()) - 1.0))
    ok_kernel = kernel_dev < 1e-9

    params = enhance.EnhancerParams.initialize(4, (7, 2), 5, 8, seed=9,
                                               dtype=np.float64)
    lf = FeatureMap(rng.standard_normal((4, 6, 6)), resolution=LOW, stride_px=14)
    weight_dev = 0.0
    for w in enhance.reassembly_weights(params, lf):
        assert np.all(w >= 0)
        weight_dev = max(weight_dev, float(np.abs(w.sum(axis=1) - 1.0).max()))
    ok_weights = weight_dev < 1e-6

    const = FeatureMap(np.full((4, 6, 6), 3.25), resolution=LOW, stride_px=14)
    up = enhance.upsample(params, const)
    up_dev = float(np.abs(up.values - 3.25).max())
    down = enhance.downsample(params, up)
    down_dev = float(np.abs(down.values - 3.25).max())
    ok_const = up_dev < 1e-5 and down_dev < 1e-5

    ok = ok_kernel and ok_weights and ok_const
    _report(3, ok, f"downsampler kernel sum dev {kernel_dev:.2e} (<1e-9); "
                   f"reassembly weight sum dev {weight_dev:.2e} (<1e-6); "
                   f"constant-field dev up {up_dev:.2e} / down {down_dev:.2e} (<1e-5)")


# ---------------------------------------------------------------------------
# 4. Synthetic end-to-end recovery
# ---------------------------------------------------------------------------


def _acceptance_parcels(heights):
    species = ["pinus_tabulaeformis", "populus_tomentosa", "other_broadleaf"] * 3
    parcels = []
    for sp, h in zip(species, heights):
        spacing = max(2.0, 0.75 * scenegen.crown_radius_m(h))
        parcels.append(scenegen.ParcelSpec(
            species=sp, stand_age=8.0, spacing_m=spacing, mean_height_m=h,
            height_jitter_m=1.0, pos_jitter_m=1.0))
    return parcels


def test_criterion_4_synthetic_end_to_end_recovery():
    t0 = time.time()
    heights = [5, 12, 8, 15, 6, 16, 9, 14, 4]

    train_scene = scenegen.generate_scene(scenegen.SceneConfig(
        width=1036, height=1036, parcel_rows=3, parcel_cols=3,
        parcels=_acceptance_parcels(heights), seed=42))
    # held-out tiles come from a freshly generated scene (the 1036x1036
    # training scene yields exactly the 4 training tiles)
    eval_scene = scenegen.generate_scene(scenegen.SceneConfig(
        width=1036, height=518, parcel_rows=3, parcel_cols=3,
        parcels=_acceptance_parcels(heights), seed=1042))

    extractor = scenegen.StubExtractor(stride=14, channels=16, seed=0)
    train_tiles, _ = raster.tile_raster(train_scene.chm, 518)
    train_rgb = [train_scene.rgb[:, t.row_off:t.row_off + 518, t.col_off:t.col_off + 518]
                 for t in train_tiles]
    eval_tiles, _ = raster.tile_raster(eval_scene.chm, 518)
    eval_rgb = [eval_scene.rgb[:, t.row_off:t.row_off + 518, t.col_off:t.col_off + 518]
                for t in eval_tiles]
    assert len(train_tiles) == 4 and len(eval_tiles) == 2

    enh_cfg = enhance.EnhancerTrainConfig(steps=300, n_views=4, lr=1e-2, seed=42,
                                          crop_px=140)
    assert enh_cfg.steps <= 2000
    params, enh_log = enhance.train_enhancer(train_rgb, extractor, enh_cfg)
    assert enh_log[-1].loss < enh_log[0].loss

    hf_train = [enhance.upsample(params, extractor.extract(x)) for x in train_rgb]
    pairs = [(hf, t.raster) for hf, t in zip(hf_train, train_tiles)]
    head_cfg = height_head.HeadTrainConfig(epochs=30, lr=0.06, seed=42, crop_px=256,
                                           crops_per_tile=3, cosine_decay=True)
    assert head_cfg.epochs <= 50
    head = height_head.HeadParams.initialize(16, h_max=30.0, seed=42)
    head, _ = height_head.train_head(head, pairs, head_cfg)

    preds, refs = [], []
    for x, t in zip(eval_rgb, eval_tiles):
        hf = enhance.upsample(params, extractor.extract(x))
        pred = height_head.predict_height(head, hf)
        preds.append(pred.values)
        refs.append(t.raster.values)
    report = evalmetrics.compute_metrics(
        raster.RasterGrid(np.concatenate(preds, axis=1).astype(np.float64)),
        raster.RasterGrid(np.concatenate(refs, axis=1)))

    elapsed = time.time() - t0
    ok = report.r2 is not None and report.r2 >= 0.8 and report.mae <= 1.5 \
        and elapsed <= 900
    _report(4, ok, f"held-out tiles: R2={report.r2:.3f} (>=0.8), "
                   f"MAE={report.mae:.3f} m (<=1.5), bias={report.bias:.3f} m, "
                   f"RMSE={report.rmse:.3f} m, runtime {elapsed:.0f}s (<=900s)")


# ---------------------------------------------------------------------------
# 5. Tree detection
# ---------------------------------------------------------------------------


def test_criterion_5_tree_detection():
    from test_forestry import local_max_oracle

    # sparse: pairwise spacing > 2 * radius -> exact recovery
    sparse = scenegen.generate_scene(scenegen.SceneConfig(
        width=160, height=160,
        parcels=[scenegen.ParcelSpec(spacing_m=12.0, mean_height_m=8.0,
                                     height_jitter_m=2.0, pos_jitter_m=1.0)],
        seed=42))
    det_sparse = forestry.detect_trees(sparse.chm, radius_m=5.0, min_height_m=2.0)
    truth_sparse = [(t.row, t.col) for t in sparse.trees]
    rate_sparse = forestry.detection_success(det_sparse, truth_sparse, match_radius_m=3.0)
    oracle_ok = all(local_max_oracle(sparse.chm.values, d.row, d.col, 5.0, 2.0)
                    for d in det_sparse)

    # dense: spacing ~6 m, jitter 1 m
    dense = scenegen.generate_scene(scenegen.SceneConfig(
        width=300, height=300,
        parcels=[scenegen.ParcelSpec(spacing_m=6.0, mean_height_m=8.0,
                                     height_jitter_m=1.0, pos_jitter_m=1.0)],
        seed=42))
    det_dense = forestry.detect_trees(dense.chm, radius_m=5.0, min_height_m=2.0)
    truth_dense = [(t.row, t.col) for t in dense.trees]
    rate_dense = forestry.detection_success(det_dense, truth_dense, match_radius_m=3.0)
    oracle_ok = oracle_ok and all(
        local_max_oracle(dense.chm.values, d.row, d.col, 5.0, 2.0) for d in det_dense)

    ok = rate_sparse == 1.0 and rate_dense >= 0.90 and oracle_ok
    _report(5, ok, f"sparse success {rate_sparse:.3f} (==1.0, {len(truth_sparse)} trees); "
                   f"dense success {rate_dense:.3f} (>=0.90, {len(truth_dense)} trees); "
                   f"all detections oracle-verified: {oracle_ok}")


# ---------------------------------------------------------------------------
# 6. Allometry exactness
# ---------------------------------------------------------------------------


def test_criterion_6_allometry_exactness():
    heights = [0.0, 1.0, 5.0, 10.0, 20.0, 30.0]
    coeffs = {
        "pinus_tabulaeformis": (0.92, -0.46, 5.03),
        "populus_tomentosa": (0.54, -0.27, 2.97),
        "other_broadleaf": (5.37, -20.86, 33.95),
    }
    worst = 0.0
    for h in heights:
        worst = max(worst, abs(forestry.dbh_from_height(h) - (1.117 * h + 5.38)))
        for tag, (a, b, c) in coeffs.items():
            worst = max(worst, abs(forestry.agb_single(tag, h) - (a * h * h + b * h + c)))
    ok = worst < 1e-9
    _report(6, ok, f"DBH and species AGB vs hand arithmetic over H in {heights}: "
                   f"max abs dev {worst:.2e} (<1e-9)")


# ---------------------------------------------------------------------------
# 7. Metrics oracle
# ---------------------------------------------------------------------------


def test_criterion_7_metrics_oracle():
    worst = 0.0
    rmse_ge_mae = True
    for seed in range(10):
        rng = np.random.default_rng(700 + seed)
        p = rng.uniform(0, 30, size=(10, 10))
        r = rng.uniform(0, 30, size=(10, 10))
        rep = evalmetrics.compute_metrics(raster.RasterGrid(p), raster.RasterGrid(r))
        pl, rl = p.ravel().tolist(), r.ravel().tolist()
        n = len(pl)
        d = [a - b for a, b in zip(pl, rl)]
        bias = math.fsum(d) / n
        mae = math.fsum(map(abs, d)) / n
        rmse = math.sqrt(math.fsum(x * x for x in d) / n)
        pm, rm = math.fsum(pl) / n, math.fsum(rl) / n
        cov = math.fsum((a - pm) * (b - rm) for a, b in zip(pl, rl))
        vp = math.fsum((a - pm) ** 2 for a in pl)
        vr = math.fsum((b - rm) ** 2 for b in rl)
        r2 = (cov * cov) / (vp * vr)
        worst = max(worst, abs(rep.bias - bias), abs(rep.mae - mae),
                    abs(rep.rmse - rmse), abs(rep.r2 - r2))
        rmse_ge_mae = rmse_ge_mae and rep.rmse >= rep.mae

    four = evalmetrics.compute_metrics(
        raster.RasterGrid(np.array([[1.0, 2.0], [3.0, 4.0]])),
        raster.RasterGrid(np.array([[1.0, 2.0], [2.0, 5.0]])))
    four_ok = (four.bias == 0.0 and four.mae == 0.5
               and abs(four.rmse - math.sqrt(0.5)) < 1e-15
               and abs(four.r2 - 0.8) < 1e-12)

    ok = worst < 1e-10 and rmse_ge_mae and four_ok
    _report(7, ok, f"10 seeded pairs vs definitional oracle: max dev {worst:.2e} "
                   f"(<1e-10); rmse>=mae on all: {rmse_ge_mae}; 4-cell hand case "
                   f"reproduced: {four_ok}")


# ---------------------------------------------------------------------------
# 8. Growth rate
# ---------------------------------------------------------------------------


def test_criterion_8_growth_rate():
    exact = forestry.growth_rate([(2013, 10.0), (2014, 20.0), (2015, 30.0)])
    ok_exact = exact == 10.0

    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(800 + seed)
        years = np.arange(2013, 2020, dtype=float)
        agb = 13.06 * (years - 2013) + 4.0 + rng.normal(0, 1.0, size=years.size)
        got = forestry.growth_rate(list(zip(years, agb)))
        xc = years - years.mean()
        a = np.array([[np.sum(xc ** 2), np.sum(xc)], [np.sum(xc), len(xc)]])
        b = np.array([np.sum(xc * agb), np.sum(agb)])
        slope = np.linalg.solve(a, b)[0]
        worst = max(worst, abs(got - slope))
    ok = ok_exact and worst < 1e-9
    _report(8, ok, f"exact line slope {exact} (==10.0); OLS vs normal-equations "
                   f"oracle max dev {worst:.2e} (<1e-9)")


# ---------------------------------------------------------------------------
# 9. Reproducibility and IO
# ---------------------------------------------------------------------------


def _chain(tmp_root, config_path, seed):
    scene = tmp_root / "scene"
    run = tmp_root / "run"
    lf, hf, pred = tmp_root / "lf", tmp_root / "hf", tmp_root / "pred"
    steps = [
        ["synth", "--config", config_path, "--seed", str(seed), "--out", str(scene)],
        ["extract", "--config", config_path, "--rgb", str(scene / "rgb.ftr"),
         "--out", str(lf)],
        ["train-enhancer", "--config", config_path, "--seed", str(seed),
         "--rgb", str(scene / "rgb.ftr"), "--out", str(run)],
        ["enhance", "--config", config_path, "--features", str(lf),
         "--params", str(run / "enhancer.params"), "--out", str(hf)],
        ["train-head", "--config", config_path, "--seed", str(seed),
         "--features", str(hf), "--ref", str(scene / "chm.rst"), "--out", str(run)],
        ["infer", "--config", config_path, "--features", str(hf),
         "--head", str(run / "head.params"), "--out", str(pred)],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, f"CLI step failed: {argv[0]}"
    return pred / "pred_full.rst", scene / "chm.rst"


def test_criterion_9_reproducibility_and_io(tmp_path, capsys):
    rng = np.random.default_rng(90)

    # raster format: bit-exact values and bytes
    grid = raster.RasterGrid(rng.uniform(0, 30, size=(40, 33)).astype(np.float32),
                             cell_size=0.5, origin=(10.0, 20.0))
    p1, p2 = tmp_path / "a.rst", tmp_path / "b.rst"
    raster.write_raster(grid, p1)
    back = raster.read_raster(p1)
    raster.write_raster(back, p2)
    raster_ok = np.array_equal(back.values, grid.values) \
        and p1.read_bytes() == p2.read_bytes()

    # feature format
    fmap = FeatureMap(rng.standard_normal((6, 9, 9)).astype(np.float32), stride_px=14)
    f1, f2 = tmp_path / "a.ftr", tmp_path / "b.ftr"
    write_features(fmap, f1)
    fback = read_features(f1)
    write_features(fback, f2)
    feature_ok = np.array_equal(fback.values, fmap.values) \
        and f1.read_bytes() == f2.read_bytes()

    # parameter-set format
    params = enhance.EnhancerParams.initialize(4, (2, 3), 3, 4, seed=3)
    q1, q2 = tmp_path / "a.params", tmp_path / "b.params"
    params.save(q1)
    pback = enhance.EnhancerParams.load(q1)
    pback.save(q2)
    params_ok = q1.read_bytes() == q2.read_bytes() and all(
        np.array_equal(a.values, b.values)
        for a, b in zip(params.all_params(), pback.all_params()))

    # full CLI chain, twice, byte-identical eval JSON
    config = {
        "seed": 7, "tile_size": 112, "patch_stride": 14, "stub_channels": 8,
        "up_factors": [7, 2], "n_views": 3, "enhancer_steps": 15,
        "enhancer_crop_px": 84, "head_epochs": 2, "head_crop_px": 84,
        "head_crops_per_tile": 1, "h_max": 30.0,
        "scene": {
            "width": 120, "height": 120, "seed": 7,
            "parcels": [{"species": "pinus_tabulaeformis", "stand_age": 8,
                         "spacing_m": 4, "mean_height_m": 9,
                         "height_jitter_m": 1, "pos_jitter_m": 1}],
        },
    }
    config_path = tmp_path / "cfg.json"
    config_path.write_text(json.dumps(config))

    outputs = []
    for run_idx in (1, 2):
        root = tmp_path / f"chain{run_idx}"
        root.mkdir()
        pred_path, ref_path = _chain(root, str(config_path), seed=7)
        capsys.readouterr()
        assert cli.main(["eval", "--pred", str(pred_path), "--ref", str(ref_path)]) == 0
        outputs.append(capsys.readouterr().out.encode())
    chain_ok = outputs[0] == outputs[1]

    ok = raster_ok and feature_ok and params_ok and chain_ok
    _report(9, ok, f"bit-exact round-trips: raster={raster_ok}, "
                   f"features={feature_ok}, params={params_ok}; CLI chain twice "
                   f"-> byte-identical eval JSON: {chain_ok} "
                   f"({outputs[0].decode().strip()})")
