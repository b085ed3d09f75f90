import numpy as np
import pytest

from rfkalign.cli import main
from rfkalign.core import Image, Homography
from rfkalign.fileio import read_flo, write_flo, write_correspondences
from rfkalign.core import Correspondence, flow_from_displacement, identity_flow
from rfkalign.imgio import write_image, write_mask_png
from rfkalign.core import MatchabilityMap
from rfkalign.robust import warp_by_homography

from conftest import smooth_texture, warp_image_by_map, translation_map

FAST_CFG = """
min_side = 0
schedule.stage_lengths = 40,15,15
ransac.min_matches_continue = 30
ransac.min_inliers_accept = 12
ransac.max_iterations = 1000
"""


@pytest.fixture
def workdir(tmp_path, rng):
    base = smooth_texture(rng, 96, 96)
    src = Image(base[:, :, None])
    write_image(src, tmp_path / "src.png")
    (tmp_path / "fast.cfg").write_text(FAST_CFG)
    return tmp_path, src


def test_align_self_produces_artifacts(workdir, capsys):
    tmp, src = workdir
    write_image(src, tmp / "tgt.png")
    rc = main(["align", str(tmp / "src.png"), str(tmp / "tgt.png"),
               "-c", str(tmp / "fast.cfg"), "-o", str(tmp / "out"),
               "--seed", "3", "--self-check"])
    assert rc == 0
    for name in ("final_flow.flo", "matchability.png", "homography_00.txt",
                 "warped_source.png", "overlay.png", "manifest.json",
                 "loss_trace_00.csv"):
        assert (tmp / "out" / name).is_file(), name
    out = capsys.readouterr().out
    val = float(out.split("self-check AEE vs identity:")[1].split("px")[0])
    assert val < 0.1
    flow = read_flo(tmp / "out" / "final_flow.flo")
    assert flow.valid.mean() > 0.5


def test_align_translated_pair(workdir):
    tmp, src = workdir
    gt = translation_map(96, 96, -2.0, 1.0)
    tgt_arr, _ = warp_image_by_map(src.data, gt)
    write_image(Image(np.clip(tgt_arr, 0, 1)), tmp / "tgt.png")
    rc = main(["align", str(tmp / "src.png"), str(tmp / "tgt.png"),
               "-c", str(tmp / "fast.cfg"), "-o", str(tmp / "out"), "--seed", "1"])
    assert rc == 0
    flow = read_flo(tmp / "out" / "final_flow.flo")
    sel = flow.valid.copy()
    sel[:10] = sel[-10:] = False
    sel[:, :10] = sel[:, -10:] = False
    err = np.hypot(flow.map_xy[:, :, 0] - gt[:, :, 0],
                   flow.map_xy[:, :, 1] - gt[:, :, 1])
    assert err[sel].mean() < 0.8


def test_align_missing_file_exit_2(workdir):
    tmp, _ = workdir
    rc = main(["align", str(tmp / "nope.png"), str(tmp / "src.png"),
               "-o", str(tmp / "out")])
    assert rc == 2


def test_align_featureless_pair_exit_3(tmp_path):
    write_image(Image(np.full((64, 64, 1), 0.5)), tmp_path / "a.png")
    write_image(Image(np.full((64, 64, 1), 0.5)), tmp_path / "b.png")
    (tmp_path / "c.cfg").write_text("min_side = 0\n")
    rc = main(["align", str(tmp_path / "a.png"), str(tmp_path / "b.png"),
               "-c", str(tmp_path / "c.cfg"), "-o", str(tmp_path / "out")])
    assert rc == 3


def test_eval_flow_identical_dirs(tmp_path, rng):
    (tmp_path / "pred").mkdir()
    (tmp_path / "gt").mkdir()
    names = ["a", "b"]
    for n in names:
        flow = flow_from_displacement(rng.uniform(-2, 2, (8, 8, 2)))
        write_flo(flow, tmp_path / "pred" / f"{n}.flo")
        write_flo(flow, tmp_path / "gt" / f"{n}.flo")
    write_correspondences([Correspondence((2.0, 2.0), (3.0, 3.0), 1.0)],
                          tmp_path / "gt" / "a.corr")
    (tmp_path / "list.txt").write_text("a\nb\n")
    rc = main(["eval-flow", str(tmp_path / "pred"), str(tmp_path / "gt"),
               str(tmp_path / "list.txt"), "-o", str(tmp_path / "out.csv")])
    assert rc == 0
    rows = (tmp_path / "out.csv").read_text().strip().splitlines()
    assert rows[0].startswith("name,aee,fl_all")
    assert rows[1].split(",")[1] == "0.000000"
    assert rows[2].split(",")[1] == "0.000000"


def test_eval_flow_empty_list(tmp_path):
    (tmp_path / "list.txt").write_text("\n")
    rc = main(["eval-flow", str(tmp_path), str(tmp_path), str(tmp_path / "list.txt")])
    assert rc == 2


def test_eval_flow_missing_pair_row_error(tmp_path, rng):
    (tmp_path / "pred").mkdir()
    (tmp_path / "gt").mkdir()
    flow = flow_from_displacement(rng.uniform(-2, 2, (6, 6, 2)))
    write_flo(flow, tmp_path / "pred" / "a.flo")
    write_flo(flow, tmp_path / "gt" / "a.flo")
    (tmp_path / "list.txt").write_text("a\nmissing\n")
    rc = main(["eval-flow", str(tmp_path / "pred"), str(tmp_path / "gt"),
               str(tmp_path / "list.txt")])
    assert rc == 2


def test_sweep_grid_shape(tmp_path, rng):
    base = smooth_texture(rng, 72, 72)
    src = Image(base[:, :, None])
    gt = translation_map(72, 72, 1.5, -1.0)
    tgt_arr, _ = warp_image_by_map(src.data, gt)
    write_image(src, tmp_path / "s.png")
    write_image(Image(np.clip(tgt_arr, 0, 1)), tmp_path / "t.png")
    write_flo(flow_from_displacement(gt - np.stack(
        np.meshgrid(np.arange(72, dtype=float), np.arange(72, dtype=float)),
        axis=2)[:, :, [0, 1]]), tmp_path / "gt.flo")
    (tmp_path / "pairs.txt").write_text("s.png t.png gt.flo\n")
    (tmp_path / "fast.cfg").write_text(FAST_CFG.replace("40,15,15", "20,8,8"))
    rc = main(["sweep", str(tmp_path / "fast.cfg"), "--pairs",
               str(tmp_path / "pairs.txt"), "-o", str(tmp_path / "sweep.csv"),
               "--lambdas", "0.02,0.01,0.005", "--mus", "2,1,0.5"])
    assert rc == 0
    rows = (tmp_path / "sweep.csv").read_text().strip().splitlines()
    assert rows[0] == "lambda,mu,metric,metric_kind,n_pairs"
    assert len(rows) == 10  # 3x3 grid
    lams = {r.split(",")[0] for r in rows[1:]}
    assert lams == {"0.02", "0.01", "0.005"}


def test_sweep_single_point(tmp_path, rng):
    base = smooth_texture(rng, 72, 72)
    write_image(Image(base[:, :, None]), tmp_path / "s.png")
    write_image(Image(base[:, :, None]), tmp_path / "t.png")
    (tmp_path / "pairs.txt").write_text("s.png t.png\n")
    (tmp_path / "fast.cfg").write_text(FAST_CFG.replace("40,15,15", "10,4,4"))
    rc = main(["sweep", str(tmp_path / "fast.cfg"), "--pairs",
               str(tmp_path / "pairs.txt"), "-o", str(tmp_path / "sweep.csv"),
               "--lambdas", "0.01", "--mus", "1"])
    assert rc == 0
    rows = (tmp_path / "sweep.csv").read_text().strip().splitlines()
    assert len(rows) == 2


def test_apps_average_identical_copies(tmp_path, rng):
    base = smooth_texture(rng, 80, 80)
    img = Image(base[:, :, None])
    for n in ("t.png", "s1.png", "s2.png"):
        write_image(img, tmp_path / n)
    (tmp_path / "fast.cfg").write_text(FAST_CFG.replace("40,15,15", "20,8,8"))
    rc = main(["apps", "average", str(tmp_path / "t.png"), str(tmp_path / "s1.png"),
               str(tmp_path / "s2.png"), "-c", str(tmp_path / "fast.cfg"),
               "-o", str(tmp_path / "out")])
    assert rc == 0
    from rfkalign.imgio import read_image
    avg = read_image(tmp_path / "out" / "average.png")
    assert np.max(np.abs(avg.data[10:-10, 10:-10] - img.data[10:-10, 10:-10])) < 0.05


def test_apps_average_too_few_inputs(tmp_path, rng):
    write_image(Image(smooth_texture(rng, 64, 64)[:, :, None]), tmp_path / "t.png")
    rc = main(["apps", "average", str(tmp_path / "t.png"), "-o", str(tmp_path / "o")])
    assert rc == 2


def test_apps_texture_empty_region(tmp_path, rng):
    base = smooth_texture(rng, 80, 80)
    img = Image(base[:, :, None])
    write_image(img, tmp_path / "s.png")
    write_image(img, tmp_path / "t.png")
    write_mask_png(MatchabilityMap(np.zeros((80, 80))), tmp_path / "region.png")
    (tmp_path / "fast.cfg").write_text(FAST_CFG.replace("40,15,15", "20,8,8"))
    rc = main(["apps", "texture", str(tmp_path / "s.png"), str(tmp_path / "t.png"),
               str(tmp_path / "region.png"), "-c", str(tmp_path / "fast.cfg"),
               "-o", str(tmp_path / "out")])
    assert rc == 0
    from rfkalign.imgio import read_image
    out = read_image(tmp_path / "out" / "texture.png")
    assert np.max(np.abs(out.data - img.data)) < 2 / 255.0


def test_eval_pose_synthetic(tmp_path, rng):
    import math
    from rfkalign.evaluate import CameraIntrinsics
    from rfkalign.fileio import write_pose_txt
    from rfkalign.imgio import write_mask_png as _wm

    w, h = 64, 48
    fx = fy = 80.0
    cx, cy = (w - 1) / 2, (h - 1) / 2
    for d in ("flows", "calib", "poses"):
        (tmp_path / d).mkdir()
    for i in range(3):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = math.radians(10.0 + 5 * i)
        k_mat = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]],
                          [-axis[1], axis[0], 0]])
        r = np.eye(3) + math.sin(ang) * k_mat + (1 - math.cos(ang)) * (k_mat @ k_mat)
        t = rng.normal(size=3)
        t /= np.linalg.norm(t)
        xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        depth = 6.0 + 1.5 * np.sin(xs / 9.0) + 1.2 * np.cos(ys / 7.0)
        pts = np.stack([(xs - cx) / fx * depth, (ys - cy) / fy * depth, depth], axis=2)
        pts_src = pts @ r.T + t
        px = pts_src[:, :, 0] / pts_src[:, :, 2] * fx + cx
        py = pts_src[:, :, 1] / pts_src[:, :, 2] * fy + cy
        flow = flow_from_displacement(
            np.stack([px - xs, py - ys], axis=2), pts_src[:, :, 2] > 0.1)
        name = f"pair{i}"
        write_flo(flow, tmp_path / "flows" / f"{name}.flo")
        _wm(MatchabilityMap(np.ones((h, w))), tmp_path / "flows" / f"{name}_match.png")
        (tmp_path / "calib" / f"{name}.calib").write_text(
            f"{fx} {fy} {cx} {cy}\n{fx} {fy} {cx} {cy}\n")
        write_pose_txt(r, t, tmp_path / "poses" / f"{name}.pose")
    rc = main(["eval-pose", str(tmp_path / "flows"), str(tmp_path / "calib"),
               str(tmp_path / "poses"), "-o", str(tmp_path / "pose.csv")])
    assert rc == 0
    text = (tmp_path / "pose.csv").read_text()
    assert "threshold_deg,mAP_percent" in text
    summary = text.strip().splitlines()[-3:]
    assert summary[0].startswith("5,100.0")
    assert summary[1].startswith("10,100.0")
    assert summary[2].startswith("20,100.0")


def test_align_with_features_dir(tmp_path, rng):
    # RFKFEAT1 files written beforehand stand in for the builtin extractor
    from rfkalign.features import MatchConfig, extract_dense_descriptors
    from rfkalign.fileio import write_featmap

    base = smooth_texture(rng, 96, 96)
    src = Image(base[:, :, None])
    gt = translation_map(96, 96, 2.0, -1.5)
    tgt_arr, _ = warp_image_by_map(src.data, gt)
    tgt = Image(np.clip(tgt_arr, 0, 1))
    write_image(src, tmp_path / "src.png")
    write_image(tgt, tmp_path / "tgt.png")
    scales = (1.0, 2.0)
    feat_dir = tmp_path / "feats"
    feat_dir.mkdir()
    for name, img in (("src", src), ("tgt", tgt)):
        for s in scales:
            write_featmap(extract_dense_descriptors(img, s),
                          feat_dir / f"{name}_s{s:.2f}.rfkfeat")
    (tmp_path / "cfg.txt").write_text(
        "match.scales = 1.0, 2.0\nmin_side = 0\n"
        "schedule.stage_lengths = 30,10,10\n"
        "ransac.min_matches_continue = 30\nransac.min_inliers_accept = 12\n"
        "ransac.max_iterations = 1000\n")
    rc = main(["align", str(tmp_path / "src.png"), str(tmp_path / "tgt.png"),
               "-c", str(tmp_path / "cfg.txt"), "-o", str(tmp_path / "out"),
               "--seed", "2", "--features-dir", str(feat_dir)])
    assert rc == 0
    flow = read_flo(tmp_path / "out" / "final_flow.flo")
    sel = flow.valid.copy()
    sel[:10] = sel[-10:] = False
    sel[:, :10] = sel[:, -10:] = False
    err = np.hypot(flow.map_xy[:, :, 0] - gt[:, :, 0],
                   flow.map_xy[:, :, 1] - gt[:, :, 1])
    assert err[sel].mean() < 0.8


def test_align_features_dir_missing_file(tmp_path, rng):
    write_image(Image(smooth_texture(rng, 64, 64)[:, :, None]), tmp_path / "a.png")
    write_image(Image(smooth_texture(rng, 64, 64)[:, :, None]), tmp_path / "b.png")
    (tmp_path / "empty").mkdir()
    rc = main(["align", str(tmp_path / "a.png"), str(tmp_path / "b.png"),
               "-o", str(tmp_path / "out"), "--features-dir", str(tmp_path / "empty")])
    assert rc == 2
