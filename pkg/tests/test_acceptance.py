"""Acceptance suite: one test per shipping criterion, each printing a
PASS line with its measured numbers (run with -s to see them live)."""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import rfkalign as rk
from rfkalign.cli import main
from rfkalign.config import PipelineConfig
from rfkalign.core import Correspondence, FlowField, Image, MatchabilityMap, flow_from_displacement
from rfkalign.evaluate import CameraIntrinsics, RelativePose
from rfkalign.features import extract_dense_descriptors
from rfkalign.fineflow import FlowParams, ObjectiveConfig, loss_gradient_check, params_to_fields
from rfkalign.imgio import write_image
from rfkalign.robust import RansacConfig, multi_homography_decompose, ransac_homography

from conftest import (apply_h, random_homography, sinusoid_map, smooth_image,
                      smooth_texture, translation_map, warp_image_by_map)
from oracles import cosine_ref, pose_map_ref, total_loss_ref
from test_fineflow import _random_instance, _ref_total


def _report(name, detail):
    print(f"[PASS] {name}: {detail}")


# ---------------------------------------------------------------------------
# 1. objective oracle equivalence
# ---------------------------------------------------------------------------

def test_objective_oracle_equivalence():
    rng = np.random.default_rng(20240501)
    cfg = ObjectiveConfig()
    t0 = time.monotonic()
    worst = 0.0
    for i in range(200):
        hs = int(rng.integers(5, 17))
        ws = int(rng.integers(5, 17))
        ht = int(rng.integers(5, 17))
        wt = int(rng.integers(5, 17))
        src, tgt, f_st, f_ts, m_s, m_t = _random_instance(rng, hs, ws, ht, wt)
        total, _ = rk.total_loss(src, tgt, f_st, f_ts, m_s, m_t, cfg)
        ref_total, *_ = _ref_total(src, tgt, f_st, f_ts, m_s, m_t, cfg)
        rel = abs(total - ref_total) / max(abs(ref_total), 1e-12)
        worst = max(worst, rel)
        assert rel < 1e-10, f"instance {i}: relative error {rel}"
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0, f"oracle equivalence took {elapsed:.1f}s"
    _report("objective oracle equivalence",
            f"200 instances, worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. gradient check
# ---------------------------------------------------------------------------

def _lattice_safe_instance(rng, size=8, grid=1):
    while True:
        src = smooth_image(rng, size, size)
        tgt = smooth_image(rng, size, size)
        pt = FlowParams(rng.uniform(-1.5, 1.5, (grid, grid, 2)) + 0.37,
                        rng.normal(0.5, 0.5, (grid, grid)))
        ps = FlowParams(rng.uniform(-1.5, 1.5, (grid, grid, 2)) - 0.23,
                        rng.normal(0.5, 0.5, (grid, grid)))
        f_st, f_ts, _, _ = params_to_fields(src, tgt, pt, ps)
        if all(np.abs(f.map_xy - np.round(f.map_xy)).min() > 5e-3
               for f in (f_st, f_ts)):
            return src, tgt, pt, ps


def test_gradient_check():
    rng = np.random.default_rng(7130)
    cfg = ObjectiveConfig()
    t0 = time.monotonic()
    worst = 0.0
    for i in range(20):
        src, tgt, pt, ps = _lattice_safe_instance(rng)
        dev = loss_gradient_check(src, tgt, pt, ps, cfg, h=1e-3)
        worst = max(worst, dev)
        assert dev < 1e-3, f"instance {i}: deviation {dev}"
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0, f"gradient check took {elapsed:.1f}s"
    _report("gradient check",
            f"20 instances, worst deviation {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. correlation volume exactness
# ---------------------------------------------------------------------------

def test_correlation_volume_exact():
    rng = np.random.default_rng(99)
    worst = 0.0
    for trial in range(5):
        a = rk.FeatureMap(rng.standard_normal((8, 8, 16)).astype(np.float32), 8, 1.0)
        b = rk.FeatureMap(rng.standard_normal((8, 8, 16)).astype(np.float32), 8, 1.0)
        vol = rk.correlation_volume(a, b, 3)
        assert vol.values.shape == (8, 8, 49)
        ad = a.data.astype(np.float64)
        bd = b.data.astype(np.float64)
        for i in range(8):
            for j in range(8):
                for m in range(-3, 4):
                    for n in range(-3, 4):
                        ch = (m + 3) * 7 + (n + 3)
                        ii, jj = i - m, j - n
                        if 0 <= ii < 8 and 0 <= jj < 8:
                            ref = cosine_ref(list(ad[i, j]), list(bd[ii, jj]))
                            diff = abs(vol.values[i, j, ch] - ref)
                            worst = max(worst, diff)
                            assert diff < 1e-12
                        else:
                            assert vol.values[i, j, ch] == -1.0
    _report("correlation volume",
            f"5 random 8x8x16 maps, all 49 offsets, worst |diff| {worst:.1e}")


# ---------------------------------------------------------------------------
# 4. RANSAC recovery
# ---------------------------------------------------------------------------

def test_ransac_recovery():
    rng = np.random.default_rng(424242)
    t0 = time.monotonic()
    errs = []
    for trial in range(100):
        gt = random_homography(rng)
        src_in = rng.uniform(0, 200, (100, 2))
        tgt_in = apply_h(gt, src_in) + rng.normal(0, 0.5, (100, 2))
        src_out = rng.uniform(0, 200, (100, 2))
        tgt_out = rng.uniform(0, 200, (100, 2))
        corrs = [Correspondence(tuple(s), tuple(t), 1.0)
                 for s, t in zip(np.concatenate([src_in, src_out]),
                                 np.concatenate([tgt_in, tgt_out]))]
        fit = ransac_homography(corrs, RansacConfig(seed=trial))
        if fit is None:
            errs.append(float("inf"))
            continue
        h, _ = fit
        held = rng.uniform(10, 190, (100, 2))
        got = apply_h(h.mat, held)
        want = apply_h(gt, held)
        errs.append(float(np.median(np.hypot(got[:, 0] - want[:, 0],
                                             got[:, 1] - want[:, 1]))))
    elapsed = time.monotonic() - t0
    errs = np.asarray(errs)
    median_err = float(np.median(errs))
    n_success = int(np.sum(errs < 1.0))
    assert median_err < 1.0, f"median held-out transfer error {median_err}"
    assert n_success >= 95, f"only {n_success}/100 trials under 1 px"
    assert elapsed < 60.0, f"RANSAC recovery took {elapsed:.1f}s"
    _report("RANSAC recovery",
            f"median err {median_err:.3f} px, {n_success}/100 trials < 1 px, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. multi-homography decomposition
# ---------------------------------------------------------------------------

def test_multi_homography_two_planes():
    rng = np.random.default_rng(5150)
    t0 = time.monotonic()
    good = 0
    for trial in range(100):
        h_a = random_homography(rng)
        h_b = random_homography(rng)
        src_a = rng.uniform(0, 200, (150, 2))
        src_b = rng.uniform(0, 200, (150, 2))
        tgt_a = apply_h(h_a, src_a) + rng.normal(0, 0.3, (150, 2))
        tgt_b = apply_h(h_b, src_b) + rng.normal(0, 0.3, (150, 2))
        src_o = rng.uniform(0, 200, (100, 2))
        tgt_o = rng.uniform(0, 200, (100, 2))
        corrs = [Correspondence(tuple(s), tuple(t), 1.0)
                 for s, t in zip(np.concatenate([src_a, src_b, src_o]),
                                 np.concatenate([tgt_a, tgt_b, tgt_o]))]
        results = multi_homography_decompose(
            corrs, RansacConfig(seed=trial, max_iterations=2000))
        if len(results) != 2:
            continue
        held = rng.uniform(10, 190, (50, 2))
        ok = True
        for h, _ in results:
            got = apply_h(h.mat, held)
            err_a = np.median(np.hypot(*(got - apply_h(h_a, held)).T))
            err_b = np.median(np.hypot(*(got - apply_h(h_b, held)).T))
            if min(err_a, err_b) >= 1.0:
                ok = False
        if ok:
            good += 1
    elapsed = time.monotonic() - t0
    assert good >= 90, f"only {good}/100 two-plane scenes fully recovered"
    _report("multi-homography decomposition",
            f"{good}/100 scenes -> exactly 2 models within 1 px, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 6. fine-flow recovery
# ---------------------------------------------------------------------------

def test_fine_flow_recovery():
    rng = np.random.default_rng(60801)
    cfg = ObjectiveConfig()
    schedule = rk.OptimizeSchedule(stage_lengths=(150, 50, 50))
    size = 48
    t0 = time.monotonic()
    n_ok = 0
    aees = []
    for trial in range(50):
        base = smooth_texture(rng, size, size)
        if trial % 2 == 0:
            dx, dy = rng.uniform(-4, 4, 2)
            gt = translation_map(size, size, dx, dy)
        else:
            gt = sinusoid_map(size, size, rng.uniform(2, 4), rng.uniform(2, 4),
                              rng.uniform(36, 56))
        tgt_arr, _ = warp_image_by_map(base[:, :, None], gt)
        src = Image(base[:, :, None])
        tgt = Image(np.clip(tgt_arr, 0, 1))
        sfm = extract_dense_descriptors(src, 1.0)
        tfm = extract_dense_descriptors(tgt, 1.0)
        res = rk.optimize_fine_flow(src, tgt, sfm, tfm, cfg, schedule)
        interior = np.zeros((size, size), bool)
        interior[8:-8, 8:-8] = True
        err = np.hypot(res.flow_st.map_xy[:, :, 0] - gt[:, :, 0],
                       res.flow_st.map_xy[:, :, 1] - gt[:, :, 1])
        aee_val = float(err[interior].mean())
        aees.append(aee_val)
        if aee_val < 1.0:
            n_ok += 1
        stages = {}
        for row in res.trace:
            stages.setdefault(row["stage"], []).append(row["total"])
        for s, vals in stages.items():
            increase = max(np.diff(vals), default=0.0)
            assert increase <= 1e-6 + 1e-12, \
                f"trial {trial} stage {s}: trace increased by {increase}"
    elapsed = time.monotonic() - t0
    assert n_ok >= 45, f"only {n_ok}/50 trials with interior AEE < 1 px"
    assert elapsed < 300.0, f"fine-flow recovery took {elapsed:.1f}s"
    _report("fine-flow recovery",
            f"{n_ok}/50 trials < 1 px (median AEE {np.median(aees):.3f} px), "
            f"traces non-increasing, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7. pose pipeline
# ---------------------------------------------------------------------------

def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def _exact_flow_pair(rng, w=64, h=48):
    fx = fy = 80.0
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    r = _rotation(rng.normal(size=3), math.radians(rng.uniform(8.0, 35.0)))
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    depth = 6.0 + 1.5 * np.sin(xs / 9.0) + 1.2 * np.cos(ys / 7.0)
    pts = np.stack([(xs - cx) / fx * depth, (ys - cy) / fy * depth, depth], axis=2)
    pts_src = pts @ r.T + t
    valid = pts_src[:, :, 2] > 0.1
    px = pts_src[:, :, 0] / pts_src[:, :, 2] * fx + cx
    py = pts_src[:, :, 1] / pts_src[:, :, 2] * fy + cy
    flow = FlowField(np.where(valid[:, :, None], np.stack([px, py], axis=2), 0.0),
                     valid)
    k = CameraIntrinsics(fx, fy, cx, cy)
    return flow, MatchabilityMap(np.ones((h, w))), k, RelativePose(r, t)


def test_pose_pipeline():
    rng = np.random.default_rng(7777)
    gts = []
    estimates = []
    errors = []
    for i in range(50):
        flow, match, k, gt = _exact_flow_pair(rng)
        res = rk.essential_from_flow(flow, match, k, k, RansacConfig(seed=i))
        assert res is not None
        pose = rk.decompose_essential(res.essential, res.src_norm[res.inliers],
                                      res.tgt_norm[res.inliers])
        rot_err, trans_err = rk.pose_angular_error(pose, gt)
        assert rot_err < 0.5 and trans_err < 0.5, \
            f"pair {i}: rot {rot_err:.3f} deg, trans {trans_err:.3f} deg"
        errors.append((rot_err, trans_err))
        estimates.append(pose)
        gts.append(gt)
    mp = rk.pose_map(errors)
    assert mp[5.0] == 100.0

    # negative control: estimates scored against shuffled ground truth
    shuffled = gts[1:] + gts[:1]
    bad_errors = [rk.pose_angular_error(est, gt)
                  for est, gt in zip(estimates, shuffled)]
    mp_bad = rk.pose_map(bad_errors)
    assert mp_bad[5.0] < 10.0, f"negative control mAP@5 = {mp_bad[5.0]}"
    _report("pose pipeline",
            f"50 pairs, worst rot {max(e[0] for e in errors):.3f} deg, "
            f"mAP@5 {mp[5.0]:.0f}%, shuffled control {mp_bad[5.0]:.1f}%")


# ---------------------------------------------------------------------------
# 8. metric definitions on hand-computed fixtures
# ---------------------------------------------------------------------------

def test_metric_definitions():
    # AEE: two pixels off by (3, 4) -> 5, two exact -> mean 2.5
    gt = flow_from_displacement(np.zeros((2, 2, 2)))
    pd = np.zeros((2, 2, 2))
    pd[0, 0] = [3.0, 4.0]
    pd[1, 1] = [3.0, 4.0]
    pred = flow_from_displacement(pd)
    assert rk.aee(pred, gt) == 2.5

    # Fl-all: errors 5 on gt magnitude 10 (outlier: 5 > 3 and 5 >= 0.5) at
    # 2 of 4 pixels -> 50%
    gd = np.zeros((2, 2, 2))
    gd[:, :, 0] = 10.0
    gt2 = flow_from_displacement(gd)
    pd2 = gd.copy()
    pd2[0, 0, 0] = 15.0
    pd2[1, 0, 0] = 15.0
    assert rk.fl_all(flow_from_displacement(pd2), gt2) == 50.0
    # boundary: error 4 on magnitude 100 is not an outlier (4 < 5), on
    # magnitude 10 it is (4 > 3 and 4 >= 0.5)
    gd3 = np.zeros((1, 1, 2))
    gd3[0, 0, 0] = 100.0
    pd3 = gd3.copy()
    pd3[0, 0, 0] = 104.0
    assert rk.fl_all(flow_from_displacement(pd3), flow_from_displacement(gd3)) == 0.0
    gd4 = np.zeros((1, 1, 2))
    gd4[0, 0, 0] = 10.0
    pd4 = gd4.copy()
    pd4[0, 0, 0] = 14.0
    assert rk.fl_all(flow_from_displacement(pd4), flow_from_displacement(gd4)) == 100.0

    # sparse accuracy at d in {1, 3, 5}: errors 0, 2, 4 -> 1/3, 2/3, 3/3
    disp = np.zeros((10, 10, 2))
    flow = flow_from_displacement(disp)
    corrs = [Correspondence((5.0, 5.0), (5.0, 5.0), 1.0),
             Correspondence((4.0, 3.0), (6.0, 3.0), 1.0),
             Correspondence((2.0, 6.0), (6.0, 6.0), 1.0)]
    assert rk.sparse_accuracy(flow, corrs, 1.0) == pytest.approx(100.0 / 3)
    assert rk.sparse_accuracy(flow, corrs, 3.0) == pytest.approx(200.0 / 3)
    assert rk.sparse_accuracy(flow, corrs, 5.0) == pytest.approx(100.0)

    # mAP at {5, 10, 20}: errors (3,3), (7,2), (12,15), (25,1) ->
    # 25%, 50%, 75%
    errors = [(3.0, 3.0), (7.0, 2.0), (12.0, 15.0), (25.0, 1.0)]
    mp = rk.pose_map(errors)
    assert mp[5.0] == 25.0 and mp[10.0] == 50.0 and mp[20.0] == 75.0
    assert mp == {t: v for t, v in pose_map_ref(errors, [5.0, 10.0, 20.0]).items()}
    _report("metric definitions", "AEE / Fl-all / sparse accuracy / mAP fixtures exact")


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------

def test_align_determinism(tmp_path):
    rng = np.random.default_rng(31)
    base = smooth_texture(rng, 96, 96)
    src = Image(base[:, :, None])
    gt = translation_map(96, 96, -2.5, 1.5)
    tgt_arr, _ = warp_image_by_map(src.data, gt)
    write_image(src, tmp_path / "src.png")
    write_image(Image(np.clip(tgt_arr, 0, 1)), tmp_path / "tgt.png")
    (tmp_path / "cfg.txt").write_text(
        "min_side = 0\nschedule.stage_lengths = 30,10,10\n"
        "ransac.min_matches_continue = 30\nransac.min_inliers_accept = 12\n"
        "ransac.max_iterations = 1000\n")
    for out in ("run1", "run2"):
        rc = main(["align", str(tmp_path / "src.png"), str(tmp_path / "tgt.png"),
                   "-c", str(tmp_path / "cfg.txt"), "-o", str(tmp_path / out),
                   "--seed", "11"])
        assert rc == 0
    flo1 = (tmp_path / "run1" / "final_flow.flo").read_bytes()
    flo2 = (tmp_path / "run2" / "final_flow.flo").read_bytes()
    man1 = (tmp_path / "run1" / "manifest.json").read_bytes()
    man2 = (tmp_path / "run2" / "manifest.json").read_bytes()
    assert flo1 == flo2, "flow output differs between identical runs"
    assert man1 == man2, "manifest differs between identical runs"
    _report("determinism",
            f"two runs byte-identical ({len(flo1)} flow bytes, {len(man1)} manifest bytes)")


# ---------------------------------------------------------------------------
# 10. shipped defaults and sweep grid
# ---------------------------------------------------------------------------

def test_default_weights_and_sweep_grid(tmp_path):
    cfg = PipelineConfig()
    assert cfg.objective.lambda_match == 0.01
    assert cfg.objective.mu_cycle == 1.0

    rng = np.random.default_rng(5)
    base = smooth_texture(rng, 64, 64)
    write_image(Image(base[:, :, None]), tmp_path / "s.png")
    write_image(Image(base[:, :, None]), tmp_path / "t.png")
    (tmp_path / "pairs.txt").write_text("s.png t.png\n")
    (tmp_path / "cfg.txt").write_text(
        "min_side = 0\nschedule.stage_lengths = 6,2,2\n"
        "ransac.min_matches_continue = 20\nransac.min_inliers_accept = 10\n"
        "ransac.max_iterations = 500\n")
    rc = main(["sweep", str(tmp_path / "cfg.txt"), "--pairs",
               str(tmp_path / "pairs.txt"), "-o", str(tmp_path / "sweep.csv")])
    assert rc == 0
    rows = (tmp_path / "sweep.csv").read_text().strip().splitlines()
    assert len(rows) == 10  # header + 3x3 grid
    grid = {(r.split(",")[0], r.split(",")[1]) for r in rows[1:]}
    assert grid == {(l, m) for l in ("0.02", "0.01", "0.005")
                    for m in ("2.0", "1.0", "0.5")}
    _report("defaults and sweep grid",
            "lambda=0.01, mu=1 shipped; sweep emits the 3x3 grid")


# ---------------------------------------------------------------------------
# 11. secondary: exported feature maps
# ---------------------------------------------------------------------------

def test_secondary_exporter_round_trip(tmp_path):
    exporter_src = Path(__file__).resolve().parents[1] / "exporter" / "src"
    if not exporter_src.is_dir():
        pytest.skip("secondary exporter component not present")
    sys.path.insert(0, str(exporter_src))
    try:
        from rfkexport.export import export_image
        from rfkexport.weights import save_random_weights
    finally:
        sys.path.pop(0)

    rng = np.random.default_rng(17)
    base = smooth_texture(rng, 72, 96)
    img_path = tmp_path / "img.png"
    write_image(Image(base[:, :, None]), img_path)
    weights = tmp_path / "imagenet_resnet50.pt"
    save_random_weights(weights, seed=0)

    out1 = tmp_path / "f1"
    out2 = tmp_path / "f2"
    scales = (0.5, 1.0)
    files1 = export_image(img_path, out1, weights_path=weights, scales=scales)
    files2 = export_image(img_path, out2, weights_path=weights, scales=scales)
    for f1, f2 in zip(files1, files2):
        assert Path(f1).read_bytes() == Path(f2).read_bytes(), "export not deterministic"

    from rfkalign.fileio import read_featmap
    from rfkalign.features import MatchConfig, mutual_nn_match
    maps = [read_featmap(f) for f in files1]
    for fm, s in zip(maps, scales):
        assert fm.scale_factor == pytest.approx(s, abs=1e-6)
        norms = np.linalg.norm(fm.data.astype(np.float64), axis=2)
        assert np.allclose(norms[fm.valid], 1.0, atol=1e-5)
    cfg = MatchConfig(scales=scales, cross_scale="same")
    corrs = mutual_nn_match(maps, maps, cfg)
    assert len(corrs) > 0
    assert all(c.score > 1.0 - 1e-5 for c in corrs)
    assert all(c.src == c.tgt for c in corrs)
    _report("secondary exporter",
            f"{len(corrs)} self-matches at cosine ~= 1 through RFKFEAT1 files")
