import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rfkalign.core import Image, bilinear_gather
from rfkalign.fineflow import _gfilter, gaussian_kernel


def smooth_texture(rng, h, w, blur_sigma=1.8, lo=0.05, hi=0.95):
    """Band-limited random texture: blurred noise stretched into [lo, hi]."""
    size = int(6 * blur_sigma) // 2 * 2 + 1
    z = _gfilter(rng.random((h, w)), gaussian_kernel(max(size, 3), blur_sigma))
    span = np.ptp(z)
    z = (z - z.min()) / (span if span > 1e-12 else 1.0)
    return lo + (hi - lo) * z


def smooth_image(rng, h, w, channels=1):
    planes = [smooth_texture(rng, h, w) for _ in range(channels)]
    return Image(np.stack(planes, axis=2))


def warp_image_by_map(src_arr: np.ndarray, gt_map: np.ndarray):
    """Synthesize a target image whose ground-truth flow to src is gt_map."""
    vals, inb = bilinear_gather(src_arr, gt_map[:, :, 0], gt_map[:, :, 1])
    if src_arr.ndim == 3:
        return np.where(inb[:, :, None], vals, 0.0), inb
    return np.where(inb, vals, 0.0), inb


def translation_map(w, h, dx, dy):
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    return np.stack([xs + dx, ys + dy], axis=2)


def sinusoid_map(w, h, ax, ay, period):
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    return np.stack([xs + ax * np.sin(2 * np.pi * ys / period),
                     ys + ay * np.cos(2 * np.pi * xs / period)], axis=2)


def random_homography(rng, scale=100.0, max_pert=0.15, max_cond=100.0):
    """A well-conditioned random homography acting on [0, scale]^2."""
    while True:
        angle = rng.uniform(-0.3, 0.3)
        s = rng.uniform(0.8, 1.25)
        tx, ty = rng.uniform(-0.1 * scale, 0.1 * scale, 2)
        p1, p2 = rng.uniform(-max_pert / scale, max_pert / scale, 2)
        h = np.array([
            [s * np.cos(angle), -s * np.sin(angle), tx],
            [s * np.sin(angle), s * np.cos(angle), ty],
            [p1, p2, 1.0],
        ])
        if np.linalg.cond(h) < max_cond:
            return h


def apply_h(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ h.T
    return ph[:, :2] / ph[:, 2:3]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
