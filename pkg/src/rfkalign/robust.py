"""Robust homography estimation and the iterated multi-homography loop.

RANSAC draws from its own seeded PCG64 stream so results are reproducible
and independent of any global random state.  The inlier metric is the
symmetric transfer error (mean of forward and backward reprojection
error), which behaves better than a one-sided error for near-degenerate
transforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (Correspondence, DegeneracyError, Homography, Image,
                   MatchabilityMap, bilinear_gather)


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 3.0
    max_iterations: int = 10000
    confidence: float = 0.9999
    seed: int = 0
    min_matches_continue: int = 50
    min_inliers_accept: int = 16
    mask_removal_threshold: float = 0.5

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be > 0")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")


def _corr_arrays(corrs: Sequence[Correspondence]) -> tuple[np.ndarray, np.ndarray]:
    src = np.asarray([c.src for c in corrs], dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray([c.tgt for c in corrs], dtype=np.float64).reshape(-1, 2)
    return src, tgt


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity transform taking the points to centroid 0, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    if d < 1e-12:
        raise DegeneracyError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * centroid[0]],
                     [0.0, s, -s * centroid[1]],
                     [0.0, 0.0, 1.0]])


def fit_homography_dlt(corrs: Sequence[Correspondence]) -> Homography:
    """Normalized direct linear transform; exact for 4 noiseless points."""
    if len(corrs) < 4:
        raise ValueError("need at least 4 correspondences")
    src, tgt = _corr_arrays(corrs)
    return fit_homography_points(src, tgt)


def fit_homography_points(src: np.ndarray, tgt: np.ndarray) -> Homography:
    n = len(src)
    t_src = _hartley_normalization(src)
    t_tgt = _hartley_normalization(tgt)
    sh = src @ t_src[:2, :2].T + t_src[:2, 2]
    th = tgt @ t_tgt[:2, :2].T + t_tgt[:2, 2]

    a = np.zeros((2 * n, 9))
    x, y = sh[:, 0], sh[:, 1]
    u, v = th[:, 0], th[:, 1]
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = 1.0
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = 1.0
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v

    _, sv, vt = np.linalg.svd(a)
    # rank < 8 means the solution is not unique (degenerate configuration)
    if n == 4 and sv[6] < 1e-9 * max(sv[0], 1.0):
        raise DegeneracyError("degenerate point configuration for DLT")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_tgt) @ hn @ t_src
    try:
        return Homography(h)
    except DegeneracyError as exc:
        raise DegeneracyError(f"DLT produced a singular homography: {exc}") from exc


def _apply_mat(m: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    w = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    ok = np.abs(w) > 1e-12
    wsafe = np.where(ok, w, 1.0)
    xo = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / wsafe
    yo = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / wsafe
    return xo, yo, ok


def symmetric_transfer_error(h: Homography, src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """Mean of forward and backward reprojection error per correspondence.

    Ill-conditioned models score inf instead of raising, so RANSAC can
    rank arbitrary hypotheses."""
    fx, fy, fok = h.apply(src[:, 0], src[:, 1])
    try:
        hinv = np.linalg.inv(h.mat)
    except np.linalg.LinAlgError:
        return np.full(len(src), np.inf)
    bx, by, bok = _apply_mat(hinv, tgt[:, 0], tgt[:, 1])
    fwd = np.hypot(fx - tgt[:, 0], fy - tgt[:, 1])
    bwd = np.hypot(bx - src[:, 0], by - src[:, 1])
    err = 0.5 * (fwd + bwd)
    err = np.where(fok & bok, err, np.inf)
    return np.where(np.isfinite(err), err, np.inf)


def _sample_is_degenerate(pts: np.ndarray) -> bool:
    # any 3 of the 4 points (near-)collinear
    for skip in range(4):
        p = np.delete(pts, skip, axis=0)
        area = abs((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                   - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1]))
        if area < 1e-9:
            return True
    return False


def ransac_homography(corrs: Sequence[Correspondence], cfg: RansacConfig
                      ) -> Optional[tuple[Homography, np.ndarray]]:
    """Seeded RANSAC over 4-point DLT hypotheses.

    Returns (homography, inlier indices) or None when fewer than 4
    correspondences exist or no model reaches ``min_inliers_accept``.
    The final model is a least-squares DLT refit on the best inlier set,
    and the returned inlier set is re-evaluated under that refit model.
    """
    n = len(corrs)
    if n < 4:
        return None
    src, tgt = _corr_arrays(corrs)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))

    best_count = 0
    best_mask: Optional[np.ndarray] = None
    needed = cfg.max_iterations
    it = 0
    while it < min(needed, cfg.max_iterations):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        if _sample_is_degenerate(src[idx]) or _sample_is_degenerate(tgt[idx]):
            continue
        try:
            h = fit_homography_points(src[idx], tgt[idx])
        except DegeneracyError:
            continue
        mask = symmetric_transfer_error(h, src, tgt) < cfg.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = count / n
            if w >= 1.0:
                break
            denom = math.log(max(1.0 - w ** 4, 1e-12))
            needed = min(cfg.max_iterations,
                         int(math.ceil(math.log(1.0 - cfg.confidence) / denom)))

    if best_mask is None or best_count < max(4, cfg.min_inliers_accept):
        return None
    try:
        h = fit_homography_points(src[best_mask], tgt[best_mask])
    except DegeneracyError:
        return None
    final = symmetric_transfer_error(h, src, tgt) < cfg.inlier_threshold
    if int(final.sum()) < max(4, cfg.min_inliers_accept):
        return None
    return h, np.flatnonzero(final)


def filter_by_masks(corrs: Sequence[Correspondence],
                    masks: Sequence[MatchabilityMap],
                    threshold: float) -> np.ndarray:
    """Indices of correspondences whose target pixel is outside every mask."""
    keep = np.ones(len(corrs), dtype=bool)
    for m in masks:
        vals = m.values
        for i, c in enumerate(corrs):
            if not keep[i]:
                continue
            x = int(round(c.tgt[0]))
            y = int(round(c.tgt[1]))
            if 0 <= x < m.width and 0 <= y < m.height and vals[y, x] > threshold:
                keep[i] = False
    return np.flatnonzero(keep)


def multi_homography_decompose(
        corrs: Sequence[Correspondence], cfg: RansacConfig,
        matchability_from_prev: Optional[Sequence[MatchabilityMap]] = None,
) -> list[tuple[Homography, np.ndarray]]:
    """Iterated RANSAC: fit, remove inliers, refit on the remainder.

    Correspondences whose target pixel falls inside a supplied previous
    matchability mask (value > cfg.mask_removal_threshold) are removed from
    the pool up front.  Each round uses seed cfg.seed + round index.  Stops
    when the pool drops below ``min_matches_continue`` or RANSAC finds no
    model.  Returned inlier index sets refer to the original input list.
    """
    corrs = list(corrs)
    pool = np.arange(len(corrs))
    if matchability_from_prev:
        keep = filter_by_masks(corrs, matchability_from_prev, cfg.mask_removal_threshold)
        pool = pool[np.isin(pool, keep)]

    results: list[tuple[Homography, np.ndarray]] = []
    round_idx = 0
    while len(pool) >= max(4, cfg.min_matches_continue):
        sub = [corrs[i] for i in pool]
        round_cfg = RansacConfig(
            inlier_threshold=cfg.inlier_threshold,
            max_iterations=cfg.max_iterations,
            confidence=cfg.confidence,
            seed=cfg.seed + round_idx,
            min_matches_continue=cfg.min_matches_continue,
            min_inliers_accept=cfg.min_inliers_accept,
            mask_removal_threshold=cfg.mask_removal_threshold)
        fit = ransac_homography(sub, round_cfg)
        if fit is None:
            break
        h, local_inl = fit
        global_inl = pool[local_inl]
        results.append((h, global_inl))
        pool = pool[~np.isin(pool, global_inl)]
        round_idx += 1
    return results


def warp_by_homography(img: Image, h: Homography, out_w: int, out_h: int
                       ) -> tuple[Image, np.ndarray]:
    """Backward warp: output pixel p samples img at h^-1 p.

    Returns the warped image (invalid pixels filled with 0) and the
    validity mask.
    """
    hinv = h.inverse()
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64),
                         np.arange(out_h, dtype=np.float64))
    px, py, ok = hinv.apply(xs, ys)
    vals, inb = bilinear_gather(img.data, px, py)
    valid = ok & inb
    return Image(np.where(valid[:, :, None], vals, 0.0)), valid
