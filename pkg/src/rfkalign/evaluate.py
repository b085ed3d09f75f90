"""Quantitative evaluation: flow error metrics and two-view relative pose.

Pose convention: a RelativePose (R, t) maps target-camera coordinates into
the source camera, X_src = R @ X_tgt + t, and the essential matrix
satisfies x_src^T E x_tgt = 0 for normalized image coordinates.  The
translation is scale-free and kept at unit norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import Correspondence, DegeneracyError, FlowField, MatchabilityMap
from .fineflow import _gather2d
from .robust import RansacConfig


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def normalize(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([(pts[:, 0] - self.cx) / self.fx,
                         (pts[:, 1] - self.cy) / self.fy], axis=1)


@dataclass(frozen=True, eq=False)
class RelativePose:
    rotation: np.ndarray     # 3x3, orthonormal, det +1
    translation: np.ndarray  # unit 3-vector

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.linalg.norm(r @ r.T - np.eye(3)) > 1e-9 or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        n = np.linalg.norm(t)
        if n < 1e-12:
            raise ValueError("translation must be nonzero")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t / n)


# ---------------------------------------------------------------------------
# dense / sparse flow metrics
# ---------------------------------------------------------------------------

def aee(pred: FlowField, gt: FlowField, mask: Optional[np.ndarray] = None,
        invalid_policy: str = "count_as_zero") -> float:
    """Average endpoint error over evaluated pixels.

    Pixels where the prediction is invalid are counted with error equal to
    the ground-truth displacement magnitude (missing prediction treated as
    zero flow) under the default policy, or dropped with
    ``invalid_policy="exclude"``.
    """
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError("flow grids differ")
    if invalid_policy not in ("count_as_zero", "exclude"):
        raise ValueError("unknown invalid policy")
    sel = gt.valid.copy()
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    if invalid_policy == "exclude":
        sel &= pred.valid
    if not sel.any():
        raise ValueError("empty evaluation set")
    dp = pred.displacement()
    dg = gt.displacement()
    err = np.hypot(dp[:, :, 0] - dg[:, :, 0], dp[:, :, 1] - dg[:, :, 1])
    gt_mag = np.hypot(dg[:, :, 0], dg[:, :, 1])
    err = np.where(pred.valid, err, gt_mag)
    return float(err[sel].mean())


def fl_all(pred: FlowField, gt: FlowField, mask: Optional[np.ndarray] = None) -> float:
    """Percentage of pixels wrong by more than 3 px and at least 5 percent
    of the ground-truth magnitude.  Invalid predictions count as zero flow."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError("flow grids differ")
    sel = gt.valid.copy()
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    if not sel.any():
        raise ValueError("empty evaluation set")
    dp = pred.displacement()
    dg = gt.displacement()
    err = np.hypot(dp[:, :, 0] - dg[:, :, 0], dp[:, :, 1] - dg[:, :, 1])
    gt_mag = np.hypot(dg[:, :, 0], dg[:, :, 1])
    err = np.where(pred.valid, err, gt_mag)
    bad = (err > 3.0) & (err >= 0.05 * gt_mag)
    return float(bad[sel].mean() * 100.0)


def sparse_accuracy(flow: FlowField, corrs: Sequence[Correspondence],
                    d: float) -> float:
    """Percentage of annotated matches whose predicted source location lies
    within d pixels of the annotation; invalid flow pixels count as misses."""
    if not corrs:
        raise ValueError("empty correspondence list")
    hits = 0
    for c in corrs:
        tx, ty = c.tgt
        px, inb_x = _gather2d(flow.map_xy[:, :, 0], np.asarray([[tx]]), np.asarray([[ty]]))
        py, _ = _gather2d(flow.map_xy[:, :, 1], np.asarray([[tx]]), np.asarray([[ty]]))
        vsamp, _ = _gather2d(flow.valid.astype(np.float64),
                             np.asarray([[tx]]), np.asarray([[ty]]))
        if not inb_x[0, 0] or vsamp[0, 0] < 1.0 - 1e-12:
            continue
        if math.hypot(px[0, 0] - c.src[0], py[0, 0] - c.src[1]) <= d:
            hits += 1
    return 100.0 * hits / len(corrs)


# ---------------------------------------------------------------------------
# essential matrix estimation
# ---------------------------------------------------------------------------

class EssentialResult(NamedTuple):
    essential: np.ndarray   # 3x3, rank 2, equal leading singular values
    inliers: np.ndarray     # indices into the sampled correspondence arrays
    src_norm: np.ndarray    # (n, 2) normalized source points
    tgt_norm: np.ndarray    # (n, 2) normalized target points


def _eight_point(src_n: np.ndarray, tgt_n: np.ndarray) -> np.ndarray:
    """Normalized 8-point solve for E with x_src^T E x_tgt = 0."""
    n = len(src_n)
    if n < 8:
        raise DegeneracyError("need at least 8 correspondences")

    def norm_transform(pts):
        c = pts.mean(axis=0)
        d = np.linalg.norm(pts - c, axis=1).mean()
        if d < 1e-12:
            raise DegeneracyError("coincident points")
        s = math.sqrt(2.0) / d
        return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])

    t_s = norm_transform(src_n)
    t_t = norm_transform(tgt_n)
    sh = src_n @ t_s[:2, :2].T + t_s[:2, 2]
    th = tgt_n @ t_t[:2, :2].T + t_t[:2, 2]

    # rows: kron(x_src_h, x_tgt_h) for x_src^T E x_tgt = 0
    a = np.zeros((n, 9))
    a[:, 0] = sh[:, 0] * th[:, 0]
    a[:, 1] = sh[:, 0] * th[:, 1]
    a[:, 2] = sh[:, 0]
    a[:, 3] = sh[:, 1] * th[:, 0]
    a[:, 4] = sh[:, 1] * th[:, 1]
    a[:, 5] = sh[:, 1]
    a[:, 6] = th[:, 0]
    a[:, 7] = th[:, 1]
    a[:, 8] = 1.0
    _, _, vt = np.linalg.svd(a)
    e = vt[-1].reshape(3, 3)
    e = t_s.T @ e @ t_t
    return _project_essential(e)


def _project_essential(e: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(e)
    sig = (s[0] + s[1]) / 2.0
    if sig < 1e-15:
        raise DegeneracyError("essential estimate collapsed to zero")
    e = u @ np.diag([1.0, 1.0, 0.0]) @ vt  # unit leading singular values
    return e


def _sampson_distance(e: np.ndarray, src_n: np.ndarray, tgt_n: np.ndarray) -> np.ndarray:
    sh = np.concatenate([src_n, np.ones((len(src_n), 1))], axis=1)
    th = np.concatenate([tgt_n, np.ones((len(tgt_n), 1))], axis=1)
    et = th @ e.T         # E @ x_tgt
    es = sh @ e           # E^T @ x_src
    top = np.einsum("ij,ij->i", sh, et)
    denom = et[:, 0] ** 2 + et[:, 1] ** 2 + es[:, 0] ** 2 + es[:, 1] ** 2
    denom = np.maximum(denom, 1e-18)
    return np.abs(top) / np.sqrt(denom)


def essential_from_flow(flow: FlowField, matchability: MatchabilityMap,
                        k_src: CameraIntrinsics, k_tgt: CameraIntrinsics,
                        cfg: RansacConfig, m_thresh: float = 0.95,
                        sampson_threshold: float = 1e-3,
                        max_samples: int = 2000,
                        exclude: Optional[np.ndarray] = None
                        ) -> Optional[EssentialResult]:
    """Essential matrix from dense flow restricted to confident pixels.

    Correspondences are taken where matchability > ``m_thresh`` (minus the
    optional exclusion mask), uniformly subsampled to ``max_samples``,
    normalized by the intrinsics and fed to seeded RANSAC with the
    normalized 8-point solver and a Sampson-distance inlier test.
    """
    sel = flow.valid & (matchability.values > m_thresh)
    if exclude is not None:
        sel &= ~np.asarray(exclude, dtype=bool)
    ys, xs = np.nonzero(sel)
    n_all = len(xs)
    if n_all > max_samples:
        step = int(math.ceil(n_all / max_samples))
        xs, ys = xs[::step], ys[::step]
    if len(xs) < 8:
        return None
    tgt_pts = np.stack([xs, ys], axis=1).astype(np.float64)
    src_pts = flow.map_xy[ys, xs]
    src_n = k_src.normalize(src_pts)
    tgt_n = k_tgt.normalize(tgt_pts)

    n = len(src_n)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    best_count = 0
    best_mask = None
    needed = cfg.max_iterations
    it = 0
    while it < min(needed, cfg.max_iterations):
        it += 1
        idx = rng.choice(n, size=8, replace=False)
        try:
            e = _eight_point(src_n[idx], tgt_n[idx])
        except DegeneracyError:
            continue
        mask = _sampson_distance(e, src_n, tgt_n) < sampson_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = count / n
            if w >= 1.0:
                break
            denom = math.log(max(1.0 - w ** 8, 1e-12))
            needed = min(cfg.max_iterations,
                         int(math.ceil(math.log(1.0 - cfg.confidence) / denom)))
    if best_mask is None or best_count < 8:
        return None
    try:
        e = _eight_point(src_n[best_mask], tgt_n[best_mask])
    except DegeneracyError:
        return None
    final = _sampson_distance(e, src_n, tgt_n) < sampson_threshold
    if int(final.sum()) < 8:
        return None
    return EssentialResult(e, np.flatnonzero(final), src_n, tgt_n)


# ---------------------------------------------------------------------------
# pose recovery
# ---------------------------------------------------------------------------

def _triangulate(p2: np.ndarray, x_tgt: np.ndarray, x_src: np.ndarray) -> np.ndarray:
    """Linear triangulation with cameras P1 = [I|0] (target), P2 (source)."""
    n = len(x_tgt)
    pts = np.zeros((n, 3))
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    for i in range(n):
        a = np.stack([
            x_tgt[i, 0] * p1[2] - p1[0],
            x_tgt[i, 1] * p1[2] - p1[1],
            x_src[i, 0] * p2[2] - p2[0],
            x_src[i, 1] * p2[2] - p2[1],
        ])
        _, _, vt = np.linalg.svd(a)
        hpt = vt[-1]
        w = hpt[3] if abs(hpt[3]) > 1e-15 else 1e-15
        pts[i] = hpt[:3] / w
    return pts


def decompose_essential(e: np.ndarray, src_n: np.ndarray, tgt_n: np.ndarray,
                        max_cheirality_points: int = 200) -> RelativePose:
    """Standard four-way decomposition, disambiguated by cheirality.

    Raises DegeneracyError when no candidate places more than half the
    points in front of both cameras.
    """
    src_n = np.asarray(src_n, dtype=np.float64)
    tgt_n = np.asarray(tgt_n, dtype=np.float64)
    if len(src_n) < 1:
        raise ValueError("need at least one correspondence for cheirality")
    if len(src_n) > max_cheirality_points:
        src_n = src_n[:max_cheirality_points]
        tgt_n = tgt_n[:max_cheirality_points]
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    candidates = []
    for r in (u @ w @ vt, u @ w.T @ vt):
        for t in (u[:, 2], -u[:, 2]):
            candidates.append((r, t))

    best = None
    best_good = -1
    n = len(src_n)
    for r, t in candidates:
        p2 = np.hstack([r, t.reshape(3, 1)])
        pts = _triangulate(p2, tgt_n, src_n)
        depth_tgt = pts[:, 2]
        depth_src = (pts @ r.T + t)[:, 2]
        good = int(np.sum((depth_tgt > 0) & (depth_src > 0)))
        if good > best_good:
            best_good = good
            best = (r, t)
    if best is None or best_good <= 0.5 * n:
        raise DegeneracyError(
            f"cheirality check failed ({best_good}/{n} points in front)")
    return RelativePose(best[0], best[1])


def pose_angular_error(est: RelativePose, gt: RelativePose) -> tuple[float, float]:
    """(rotation, translation) angular errors in degrees; the translation
    error is sign-invariant since the direction's sign is unobservable."""
    tr = np.trace(gt.rotation.T @ est.rotation)
    rot = math.degrees(math.acos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))
    dot = abs(float(np.dot(gt.translation, est.translation)))
    trans = math.degrees(math.acos(np.clip(dot, -1.0, 1.0)))
    return rot, trans


def pose_map(errors: Sequence[tuple[float, float]],
             thresholds: Sequence[float] = (5.0, 10.0, 20.0)) -> dict[float, float]:
    """Fraction of pairs whose rotation AND translation errors are both
    within each threshold (percentage, fraction-at-threshold)."""
    if not errors:
        raise ValueError("empty error list")
    arr = np.asarray(errors, dtype=np.float64)
    worst = arr.max(axis=1)
    return {float(t): float((worst <= t).mean() * 100.0) for t in thresholds}
