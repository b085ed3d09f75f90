#!/usr/bin/env python3
"""Generate a synthetic aligned image pair with ground-truth flow.

Writes src.png, tgt.png and gt.flo into the output directory.  The target
is the source resampled through a known warp (translation, sinusoid or a
homography plus sinusoid), so alignment quality can be scored exactly.

Example:
    python scripts/make_synthetic_pair.py -o /tmp/pair --kind sine --size 128
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from rfkalign.core import FlowField, Image, bilinear_gather
from rfkalign.fileio import write_flo
from rfkalign.fineflow import _gfilter, gaussian_kernel
from rfkalign.imgio import write_image


def texture(rng, h, w, blur=1.8):
    size = max(3, int(6 * blur) // 2 * 2 + 1)
    z = _gfilter(rng.random((h, w)), gaussian_kernel(size, blur))
    z = (z - z.min()) / max(np.ptp(z), 1e-9)
    return 0.05 + 0.9 * z


def gt_map(kind, w, h, rng):
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    if kind == "translation":
        dx, dy = rng.uniform(-4, 4, 2)
        return np.stack([xs + dx, ys + dy], axis=2)
    if kind == "sine":
        period = rng.uniform(0.6, 1.1) * min(w, h)
        ax, ay = rng.uniform(2, 4, 2)
        return np.stack([xs + ax * np.sin(2 * np.pi * ys / period),
                         ys + ay * np.cos(2 * np.pi * xs / period)], axis=2)
    if kind == "homography-sine":
        a = rng.uniform(-0.06, 0.06)
        s = rng.uniform(0.97, 1.03)
        hmat = np.array([[s * np.cos(a), -s * np.sin(a), rng.uniform(-3, 3)],
                         [s * np.sin(a), s * np.cos(a), rng.uniform(-3, 3)],
                         [rng.uniform(-1e-4, 1e-4), rng.uniform(-1e-4, 1e-4), 1.0]])
        wdn = hmat[2, 0] * xs + hmat[2, 1] * ys + hmat[2, 2]
        hx = (hmat[0, 0] * xs + hmat[0, 1] * ys + hmat[0, 2]) / wdn
        hy = (hmat[1, 0] * xs + hmat[1, 1] * ys + hmat[1, 2]) / wdn
        period = 0.8 * min(w, h)
        return np.stack([hx + 2.0 * np.sin(2 * np.pi * ys / period),
                         hy + 2.0 * np.cos(2 * np.pi * xs / period)], axis=2)
    raise SystemExit(f"unknown kind {kind!r}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-o", "--out", required=True)
    ap.add_argument("--kind", default="sine",
                    choices=("translation", "sine", "homography-sine"))
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    w = h = args.size
    src_arr = texture(rng, h, w)
    gt = gt_map(args.kind, w, h, rng)
    vals, inb = bilinear_gather(src_arr, gt[:, :, 0], gt[:, :, 1])
    tgt_arr = np.clip(np.where(inb, vals, 0.0), 0, 1)

    write_image(Image(src_arr[:, :, None]), out / "src.png")
    write_image(Image(tgt_arr[:, :, None]), out / "tgt.png")
    write_flo(FlowField(gt, inb), out / "gt.flo")
    print(f"wrote {out}/src.png, tgt.png, gt.flo ({args.kind}, {w}x{h})")


if __name__ == "__main__":
    main()
