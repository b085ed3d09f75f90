"""The full two-stage alignment pipeline for one image pair.

Per iteration: RANSAC fits a homography on the surviving correspondence
pool, the source is warped by it, the fine flow refines the warped pair,
and the iteration's cycle-consistent matchability decides which target
pixels it owns.  Correspondences that were inliers or that land in the
matchable region are removed before the next round.  The per-iteration
flows (composed back through each homography so they sample the original
source) are aggregated into the final field.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional

import numpy as np

from . import compose as compose_mod
from .config import PipelineConfig, config_dict, config_hash
from .core import (AlignmentIteration, AlignmentResult, Correspondence,
                   FlowField, Image, MatchabilityMap, resize_min_side)
from .features import extract_dense_descriptors, extract_multiscale, mutual_nn_match
from .fileio import write_flo, write_homography_txt
from .fineflow import cycle_matchability, optimize_fine_flow
from .imgio import write_image, write_mask_png
from .robust import RansacConfig, ransac_homography, warp_by_homography


def _round_cfg(cfg: RansacConfig, round_idx: int) -> RansacConfig:
    return dataclasses.replace(cfg, seed=cfg.seed + round_idx)


def align_pair(src: Image, tgt: Image, cfg: PipelineConfig,
               feature_maps: Optional[tuple[list, list]] = None,
               trace_sink: Optional[list] = None) -> AlignmentResult:
    """Align ``src`` onto ``tgt`` (both already resized by the caller).

    ``feature_maps`` optionally supplies pre-extracted (src, tgt) maps, one
    per configured scale (the exported-features path).  ``trace_sink``
    collects the per-iteration fine-stage loss traces.
    """
    if feature_maps is not None:
        src_maps, tgt_maps = feature_maps
    else:
        src_maps = extract_multiscale(src, cfg.match)
        tgt_maps = extract_multiscale(tgt, cfg.match)
    corrs = mutual_nn_match(src_maps, tgt_maps, cfg.match)

    iterations: list[AlignmentIteration] = []
    pool = np.arange(len(corrs))
    for round_idx in range(cfg.max_homographies):
        if len(pool) < max(4, cfg.ransac.min_matches_continue) and round_idx > 0:
            break
        if len(pool) < 4:
            break
        fit = ransac_homography([corrs[i] for i in pool], _round_cfg(cfg.ransac, round_idx))
        if fit is None:
            break
        h, local_inliers = fit
        inliers = pool[local_inliers]

        warped, wvalid = warp_by_homography(src, h, tgt.width, tgt.height)
        wfm = extract_dense_descriptors(warped, 1.0)
        tfm = extract_dense_descriptors(tgt, 1.0)
        fine = optimize_fine_flow(warped, tgt, wfm, tfm, cfg.objective,
                                  cfg.schedule, src_valid=wvalid,
                                  smoothness_weight=cfg.smoothness_weight)
        if trace_sink is not None:
            trace_sink.append(fine.trace)
        m_cycle = cycle_matchability(fine.match_src, fine.match_tgt, fine.flow_st)
        composed = compose_mod.compose_homography_flow(h, fine.flow_st,
                                                       src.width, src.height)
        iterations.append(AlignmentIteration(h, composed, m_cycle))

        # shrink the pool: homography inliers plus confidently matched pixels
        keep = np.ones(len(pool), dtype=bool)
        inlier_set = set(int(i) for i in inliers)
        mvals = m_cycle.values
        for pi, ci in enumerate(pool):
            if int(ci) in inlier_set:
                keep[pi] = False
                continue
            x = int(round(corrs[ci].tgt[0]))
            y = int(round(corrs[ci].tgt[1]))
            if (0 <= x < m_cycle.width and 0 <= y < m_cycle.height
                    and mvals[y, x] > cfg.ransac.mask_removal_threshold):
                keep[pi] = False
        new_pool = pool[keep]
        if len(new_pool) == len(pool):  # no progress; avoid refitting the same model
            break
        pool = new_pool
        if len(pool) < max(4, cfg.ransac.min_matches_continue):
            break

    if not iterations:
        return AlignmentResult(tuple(),
                               FlowField(np.zeros((tgt.height, tgt.width, 2)),
                                         np.zeros((tgt.height, tgt.width), bool)),
                               MatchabilityMap(np.zeros((tgt.height, tgt.width))))
    final_flow, final_match = compose_mod.aggregate_flows(
        [(it.flow, it.matchability) for it in iterations],
        threshold=cfg.aggregate_threshold, rule=cfg.aggregate_rule)
    return AlignmentResult(tuple(iterations), final_flow, final_match)


def prepare_image(img: Image, cfg: PipelineConfig) -> Image:
    if cfg.min_side > 0:
        return resize_min_side(img, cfg.min_side)
    return img


def write_manifest(out_dir: Path, cfg: PipelineConfig, command: str,
                   inputs: dict, extras: Optional[dict] = None) -> None:
    manifest = {
        "command": command,
        "inputs": inputs,
        "seed": cfg.seed,
        "config": config_dict(cfg),
        "config_sha256": config_hash(cfg),
    }
    if extras:
        manifest.update(extras)
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(out_dir / "manifest.json")


def write_trace_csv(path: Path, trace: list[dict]) -> None:
    lines = ["iteration,L_ssim,L_match,L_cycle,total"]
    for row in trace:
        lines.append(f"{row['iteration']},{row['ssim']:.12g},{row['match']:.12g},"
                     f"{row['cycle']:.12g},{row['total']:.12g}")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def write_alignment_artifacts(out_dir, src: Image, tgt: Image,
                              result: AlignmentResult,
                              traces: list[list[dict]]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_flo(result.final_flow, out_dir / "final_flow.flo")
    write_mask_png(result.final_matchability, out_dir / "matchability.png")
    for i, it in enumerate(result.iterations):
        write_homography_txt(it.homography.mat, out_dir / f"homography_{i:02d}.txt")
    for i, trace in enumerate(traces):
        write_trace_csv(out_dir / f"loss_trace_{i:02d}.csv", trace)
    warped, wvalid = compose_mod.warp_with_flow(src, result.final_flow)
    write_image(warped, out_dir / "warped_source.png")
    both = np.where(wvalid[:, :, None], 0.5 * (warped.data + tgt.data), tgt.data)
    write_image(Image(both), out_dir / "overlay.png")
