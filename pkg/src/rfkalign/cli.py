"""Command-line pipeline driver.

Exit codes: 0 success, 2 input error, 3 no homography found,
4 internal invariant violation.  Set RFK_LOG=debug|info|quiet to control
verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .compose import average_aligned, texture_transfer, warp_with_flow
from .config import PipelineConfig, load_config
from .core import DegeneracyError, FormatError, Image, MatchabilityMap
from .evaluate import (CameraIntrinsics, RelativePose, aee, decompose_essential,
                       essential_from_flow, fl_all, pose_angular_error, pose_map,
                       sparse_accuracy)
from .fileio import (read_calib_txt, read_correspondences, read_flo,
                     read_featmap, read_pose_txt)
from .imgio import read_image, read_mask_png, read_selection_mask, write_image
from .pipeline import (align_pair, prepare_image, write_alignment_artifacts,
                       write_manifest)

log = logging.getLogger("rfkalign")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NO_MODEL = 3
EXIT_INTERNAL = 4


class InputError(Exception):
    pass


class NoModelError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("RFK_LOG", "info").lower()
    lvl = {"quiet": logging.WARNING, "info": logging.INFO,
           "debug": logging.DEBUG}.get(level, logging.INFO)
    logging.basicConfig(level=lvl, format="%(levelname)s %(name)s: %(message)s")


def _load_image(path) -> Image:
    try:
        return read_image(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc
    except FormatError as exc:
        raise InputError(str(exc)) from exc


def _config_from_args(args) -> PipelineConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
        overrides["ransac.seed"] = args.seed
    try:
        cfg = load_config(getattr(args, "config", None), overrides)
    except FileNotFoundError as exc:
        raise InputError(f"config file not found: {args.config}") from exc
    except ValueError as exc:
        raise InputError(f"bad config: {exc}") from exc
    if cfg.seed != cfg.ransac.seed:
        cfg = dataclasses.replace(
            cfg, ransac=dataclasses.replace(cfg.ransac, seed=cfg.seed))
    return cfg


def _load_feature_maps(feat_dir: Path, img_path: Path, scales) -> list:
    maps = []
    for s in scales:
        p = feat_dir / f"{Path(img_path).stem}_s{s:.2f}.rfkfeat"
        if not p.is_file():
            raise InputError(f"missing feature map file: {p}")
        maps.append(read_featmap(p))
    return maps


# ---------------------------------------------------------------------------
# align
# ---------------------------------------------------------------------------

def cmd_align(args) -> int:
    cfg = _config_from_args(args)
    src = _load_image(args.src)
    tgt = _load_image(args.tgt)
    feature_maps = None
    if args.features_dir:
        # exported features describe the files as given; skip resizing
        feat_dir = Path(args.features_dir)
        feature_maps = (_load_feature_maps(feat_dir, args.src, cfg.match.scales),
                        _load_feature_maps(feat_dir, args.tgt, cfg.match.scales))
        log.info("using exported feature maps from %s (no resize)", feat_dir)
    else:
        src = prepare_image(src, cfg)
        tgt = prepare_image(tgt, cfg)

    traces: list = []
    result = align_pair(src, tgt, cfg, feature_maps=feature_maps,
                        trace_sink=traces)
    if not result.iterations:
        log.error("no homography found: %d usable correspondences were not "
                  "enough to reach min_inliers_accept=%d; fine stage skipped",
                  0, cfg.ransac.min_inliers_accept)
        raise NoModelError("no homography found")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_alignment_artifacts(out_dir, src, tgt, result, traces)
    write_manifest(out_dir, cfg, "align",
                   {"src": str(args.src), "tgt": str(args.tgt)},
                   {"n_homographies": len(result.iterations),
                    "version": __version__})
    log.info("align: %d homographies, wrote %s", len(result.iterations), out_dir)
    if args.self_check:
        disp = result.final_flow.displacement()
        mask = result.final_flow.valid
        if mask.any():
            err = float(np.hypot(disp[:, :, 0], disp[:, :, 1])[mask].mean())
        else:
            err = float("nan")
        print(f"self-check AEE vs identity: {err:.6f} px")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval-flow
# ---------------------------------------------------------------------------

def _eval_flow_row(name: str, pred_dir: Path, gt_dir: Path, policy: str):
    pred = read_flo(pred_dir / f"{name}.flo")
    gt = read_flo(gt_dir / f"{name}.flo")
    row = {"name": name,
           "aee": aee(pred, gt, invalid_policy=policy),
           "fl_all": fl_all(pred, gt)}
    corr_path = gt_dir / f"{name}.corr"
    if corr_path.is_file():
        corrs = read_correspondences(corr_path)
        for d in (1, 3, 5):
            row[f"acc{d}"] = sparse_accuracy(pred, corrs, float(d))
    return row


def cmd_eval_flow(args) -> int:
    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    try:
        names = [ln.strip() for ln in Path(args.list_file).read_text().splitlines()
                 if ln.strip() and not ln.startswith("#")]
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc
    if not names:
        raise InputError(f"empty pair list: {args.list_file}")

    rows: list = [None] * len(names)
    errors = 0

    def work(i_name):
        i, name = i_name
        try:
            rows[i] = _eval_flow_row(name, pred_dir, gt_dir, args.policy)
        except Exception as exc:  # row-level failure keeps the batch going
            rows[i] = {"name": name, "error": str(exc)}

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as ex:
        list(ex.map(work, enumerate(names)))

    header = ["name", "aee", "fl_all", "acc1", "acc3", "acc5", "error"]
    lines = [",".join(header)]
    for row in rows:
        if "error" in row:
            errors += 1
        lines.append(",".join(
            ("" if row.get(k) is None else
             (row[k] if k in ("name", "error") else f"{row[k]:.6f}"))
            if k in row else "" for k in header))
    csv = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(csv)
    sys.stdout.write(csv)
    if errors:
        log.error("%d/%d pairs failed", errors, len(names))
        return EXIT_INPUT
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval-pose
# ---------------------------------------------------------------------------

def _eval_pose_row(name: str, args, cfg: PipelineConfig):
    flow_dir = Path(args.flow_dir)
    flow = read_flo(flow_dir / f"{name}.flo")
    match = read_mask_png(flow_dir / f"{name}_match.png")
    k_src_arr, k_tgt_arr = read_calib_txt(Path(args.calib_dir) / f"{name}.calib")
    k_src = CameraIntrinsics(*k_src_arr)
    k_tgt = CameraIntrinsics(*k_tgt_arr)
    r_gt, t_gt = read_pose_txt(Path(args.gt_pose_dir) / f"{name}.pose")
    gt_pose = RelativePose(r_gt, t_gt)
    exclude = None
    if args.mask_dir:
        mp = Path(args.mask_dir) / f"{name}.png"
        if mp.is_file():
            exclude = read_selection_mask(mp)
    est = essential_from_flow(flow, match, k_src, k_tgt, cfg.ransac,
                              m_thresh=args.m_thresh, exclude=exclude)
    if est is None:
        raise DegeneracyError("essential estimation failed (too few confident pixels)")
    inl = est.inliers
    pose = decompose_essential(est.essential, est.src_norm[inl], est.tgt_norm[inl])
    rot_err, trans_err = pose_angular_error(pose, gt_pose)
    return {"name": name, "rot_deg": rot_err, "trans_deg": trans_err,
            "n_inliers": len(inl)}


def cmd_eval_pose(args) -> int:
    cfg = _config_from_args(args)
    flow_dir = Path(args.flow_dir)
    if not flow_dir.is_dir():
        raise InputError(f"no such directory: {flow_dir}")
    names = sorted(p.stem for p in flow_dir.glob("*.flo"))
    if not names:
        raise InputError(f"no .flo files in {flow_dir}")

    rows: list = [None] * len(names)

    def work(i_name):
        i, name = i_name
        try:
            rows[i] = _eval_pose_row(name, args, cfg)
        except Exception as exc:
            rows[i] = {"name": name, "error": str(exc)}

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as ex:
        list(ex.map(work, enumerate(names)))

    errors = [r for r in rows if "error" in r]
    ok = [r for r in rows if "error" not in r]
    lines = ["name,rot_deg,trans_deg,n_inliers,error"]
    for r in rows:
        if "error" in r:
            lines.append(f"{r['name']},,,,{r['error']}")
        else:
            lines.append(f"{r['name']},{r['rot_deg']:.6f},{r['trans_deg']:.6f},"
                         f"{r['n_inliers']},")
    if ok:
        mp = pose_map([(r["rot_deg"], r["trans_deg"]) for r in ok],
                      thresholds=(5.0, 10.0, 20.0))
        lines.append("")
        lines.append("threshold_deg,mAP_percent")
        for t in sorted(mp):
            lines.append(f"{t:.0f},{mp[t]:.4f}")
    csv = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(csv)
    sys.stdout.write(csv)
    if errors:
        log.error("%d/%d pairs failed", len(errors), len(names))
        return EXIT_INPUT
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    try:
        pair_lines = [ln.split() for ln in Path(args.pairs).read_text().splitlines()
                      if ln.strip() and not ln.startswith("#")]
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc
    if not pair_lines:
        raise InputError("empty pair list")
    base = Path(args.pairs).parent
    pairs = []
    for parts in pair_lines:
        if len(parts) not in (2, 3):
            raise InputError("pair list lines must be `src tgt [gt.flo]`")
        src = _load_image(base / parts[0] if not Path(parts[0]).is_absolute() else parts[0])
        tgt = _load_image(base / parts[1] if not Path(parts[1]).is_absolute() else parts[1])
        gt = None
        if len(parts) == 3:
            gp = base / parts[2] if not Path(parts[2]).is_absolute() else Path(parts[2])
            gt = read_flo(gp)
        pairs.append((prepare_image(src, cfg), prepare_image(tgt, cfg), gt))

    lambdas = [float(v) for v in args.lambdas.split(",")]
    mus = [float(v) for v in args.mus.split(",")]
    lines = ["lambda,mu,metric,metric_kind,n_pairs"]
    for lam in lambdas:
        for mu in mus:
            run_cfg = dataclasses.replace(
                cfg, objective=dataclasses.replace(
                    cfg.objective, lambda_match=lam, mu_cycle=mu))
            vals = []
            kind = "aee"
            for src, tgt, gt in pairs:
                traces: list = []
                result = align_pair(src, tgt, run_cfg, trace_sink=traces)
                if gt is not None and result.iterations:
                    vals.append(aee(result.final_flow, gt))
                elif traces:
                    vals.append(traces[-1][-1]["total"])
                    kind = "final_loss"
                else:
                    vals.append(float("nan"))
                    kind = "failed"
            metric = float(np.nanmean(vals)) if vals else float("nan")
            lines.append(f"{lam},{mu},{metric:.6f},{kind},{len(pairs)}")
            log.info("sweep lambda=%g mu=%g -> %s %.6f", lam, mu, kind, metric)
    csv = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(csv)
    sys.stdout.write(csv)
    return EXIT_OK


# ---------------------------------------------------------------------------
# apps
# ---------------------------------------------------------------------------

def cmd_apps(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.mode == "average":
        if len(args.inputs) < 2:
            raise InputError("average needs a target plus at least one source")
        tgt = prepare_image(_load_image(args.inputs[0]), cfg)
        stack = [(tgt, np.ones((tgt.height, tgt.width), bool))]
        for src_path in args.inputs[1:]:
            src = prepare_image(_load_image(src_path), cfg)
            result = align_pair(src, tgt, cfg)
            if not result.iterations:
                log.warning("skipping %s: no homography", src_path)
                continue
            warped, valid = warp_with_flow(src, result.final_flow)
            stack.append((warped, valid))
        if len(stack) < 2:
            raise NoModelError("no source could be aligned")
        write_image(average_aligned(stack), out_dir / "average.png")
        log.info("wrote %s (%d contributors)", out_dir / "average.png", len(stack))
    else:  # texture
        if len(args.inputs) != 3:
            raise InputError("texture needs: <source> <target> <region.png>")
        src = prepare_image(_load_image(args.inputs[0]), cfg)
        tgt = prepare_image(_load_image(args.inputs[1]), cfg)
        region_img = read_mask_png(args.inputs[2])
        if (region_img.height, region_img.width) != (tgt.height, tgt.width):
            raise InputError("region mask must match the (resized) target size")
        result = align_pair(src, tgt, cfg)
        if not result.iterations:
            raise NoModelError("no homography found")
        out = texture_transfer(src, tgt, result.final_flow,
                               MatchabilityMap(region_img.values),
                               threshold=0.5)
        write_image(out, out_dir / "texture.png")
        log.info("wrote %s", out_dir / "texture.png")
    write_manifest(out_dir, cfg, f"apps-{args.mode}",
                   {"inputs": [str(p) for p in args.inputs]},
                   {"version": __version__})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfkalign",
                                description="two-stage dense image alignment")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("align", help="align a source image onto a target")
    pa.add_argument("src")
    pa.add_argument("tgt")
    pa.add_argument("-c", "--config", default=None)
    pa.add_argument("-o", "--out", required=True)
    pa.add_argument("--seed", type=int, default=None)
    pa.add_argument("--jobs", type=int, default=1)
    pa.add_argument("--features-dir", default=None,
                    help="directory of RFKFEAT1 files replacing builtin descriptors")
    pa.add_argument("--self-check", action="store_true",
                    help="print final AEE against the identity flow")
    pa.set_defaults(fn=cmd_align)

    pf = sub.add_parser("eval-flow", help="AEE / Fl-all / sparse accuracy over a batch")
    pf.add_argument("pred_dir")
    pf.add_argument("gt_dir")
    pf.add_argument("list_file")
    pf.add_argument("-o", "--out", default=None)
    pf.add_argument("--jobs", type=int, default=1)
    pf.add_argument("--policy", choices=("count_as_zero", "exclude"),
                    default="count_as_zero")
    pf.set_defaults(fn=cmd_eval_flow)

    pp = sub.add_parser("eval-pose", help="two-view pose mAP from dense flows")
    pp.add_argument("flow_dir")
    pp.add_argument("calib_dir")
    pp.add_argument("gt_pose_dir")
    pp.add_argument("-c", "--config", default=None)
    pp.add_argument("-o", "--out", default=None)
    pp.add_argument("--seed", type=int, default=None)
    pp.add_argument("--jobs", type=int, default=1)
    pp.add_argument("--m-thresh", type=float, default=0.95)
    pp.add_argument("--mask-dir", default=None,
                    help="optional exclusion masks (white = exclude)")
    pp.set_defaults(fn=cmd_eval_pose)

    ps = sub.add_parser("sweep", help="objective weight sweep on a fixed pair list")
    ps.add_argument("config", nargs="?", default=None)
    ps.add_argument("--pairs", required=True)
    ps.add_argument("-o", "--out", default=None)
    ps.add_argument("--seed", type=int, default=None)
    ps.add_argument("--lambdas", default="0.02,0.01,0.005")
    ps.add_argument("--mus", default="2,1,0.5")
    ps.set_defaults(fn=cmd_sweep)

    pap = sub.add_parser("apps", help="average-image and texture-transfer outputs")
    pap.add_argument("mode", choices=("average", "texture"))
    pap.add_argument("inputs", nargs="+")
    pap.add_argument("-c", "--config", default=None)
    pap.add_argument("-o", "--out", required=True)
    pap.add_argument("--seed", type=int, default=None)
    pap.set_defaults(fn=cmd_apps)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except NoModelError as exc:
        log.error("%s", exc)
        return EXIT_NO_MODEL
    except (FormatError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except DegeneracyError as exc:
        log.error("degenerate geometry: %s", exc)
        return EXIT_NO_MODEL
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
