"""Flow composition, multi-iteration aggregation and application outputs."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import (FlowField, Homography, Image, MatchabilityMap,
                   bilinear_gather)


def compose_homography_flow(h: Homography, fine: FlowField,
                            src_w: Optional[int] = None,
                            src_h: Optional[int] = None) -> FlowField:
    """Fold a coarse homography into a fine flow over the warped pair.

    ``fine`` samples the homography-warped source; the composed field
    samples the original source directly: map(p) = h^-1 * fine.map(p).
    When the original source dimensions are given, samples leaving them
    are marked invalid.
    """
    hinv = h.inverse()
    xo, yo, ok = hinv.apply(fine.map_xy[:, :, 0], fine.map_xy[:, :, 1])
    valid = fine.valid & ok & np.isfinite(xo) & np.isfinite(yo)
    if src_w is not None and src_h is not None:
        valid &= (xo >= 0) & (xo <= src_w - 1) & (yo >= 0) & (yo <= src_h - 1)
    map_xy = np.stack([np.where(valid, xo, 0.0), np.where(valid, yo, 0.0)], axis=2)
    return FlowField(map_xy, valid)


def aggregate_flows(iterations: Sequence[tuple[FlowField, MatchabilityMap]],
                    threshold: float = 0.5,
                    rule: str = "first") -> tuple[FlowField, MatchabilityMap]:
    """Merge per-iteration flows into one field.

    Each target pixel is owned by the first iteration (discovery order)
    whose matchability exceeds ``threshold`` and whose flow is valid;
    ``rule="best"`` hands ownership to the highest matchability instead.
    Unclaimed pixels are invalid with matchability 0.
    """
    if rule not in ("first", "best"):
        raise ValueError("rule must be 'first' or 'best'")
    if not iterations:
        return (FlowField(np.zeros((1, 1, 2)), np.zeros((1, 1), bool)),
                MatchabilityMap(np.zeros((1, 1))))
    h, w = iterations[0][0].height, iterations[0][0].width
    for flow, mask in iterations:
        if (flow.height, flow.width) != (h, w) or (mask.height, mask.width) != (h, w):
            raise ValueError("all iterations must share the target grid")

    out_map = np.zeros((h, w, 2))
    out_valid = np.zeros((h, w), bool)
    out_match = np.zeros((h, w))
    if rule == "first":
        for flow, mask in iterations:
            claim = (~out_valid) & flow.valid & (mask.values > threshold)
            out_map[claim] = flow.map_xy[claim]
            out_match[claim] = mask.values[claim]
            out_valid |= claim
    else:
        best = np.full((h, w), -np.inf)
        for flow, mask in iterations:
            eligible = flow.valid & (mask.values > threshold)
            claim = eligible & (mask.values > best)
            out_map[claim] = flow.map_xy[claim]
            out_match[claim] = mask.values[claim]
            best[claim] = mask.values[claim]
            out_valid |= claim
    return FlowField(out_map, out_valid), MatchabilityMap(out_match)


def warp_with_flow(img: Image, flow: FlowField) -> tuple[Image, np.ndarray]:
    """Backward bilinear warp of ``img`` through the flow field."""
    vals, inb = bilinear_gather(img.data, flow.map_xy[:, :, 0], flow.map_xy[:, :, 1])
    valid = flow.valid & inb
    return Image(np.where(valid[:, :, None], vals, 0.0)), valid


def average_aligned(images: Sequence[tuple[Image, np.ndarray]]) -> Image:
    """Per-pixel mean over valid contributors; uncovered pixels become 0."""
    if not images:
        raise ValueError("average_aligned needs at least one image")
    h, w, c = images[0][0].data.shape
    acc = np.zeros((h, w, c))
    cnt = np.zeros((h, w, 1))
    for img, valid in images:
        if img.data.shape != (h, w, c):
            raise ValueError("all images must share dimensions")
        v = np.asarray(valid, dtype=bool)
        acc += np.where(v[:, :, None], img.data, 0.0)
        cnt += v[:, :, None]
    return Image(np.where(cnt > 0, acc / np.maximum(cnt, 1), 0.0))


def texture_transfer(src: Image, tgt: Image, flow: FlowField,
                     region: MatchabilityMap, threshold: float = 0.5) -> Image:
    """Replace target pixels inside the region by the flow-warped source."""
    if (flow.height, flow.width) != (tgt.height, tgt.width):
        raise ValueError("flow must live on the target grid")
    if (region.height, region.width) != (tgt.height, tgt.width):
        raise ValueError("region must live on the target grid")
    warped, valid = warp_with_flow(src, flow)
    take = (region.values > threshold) & valid
    if src.channels != tgt.channels:
        raise ValueError("source and target must share channel count")
    return Image(np.where(take[:, :, None], warped.data, tgt.data))
