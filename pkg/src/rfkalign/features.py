"""Dense multi-scale descriptors and symmetric sparse matching.

The built-in descriptor is a SIFT-like orientation histogram: the image is
cut into 8x8-pixel cells, each cell accumulates a magnitude-weighted 8-bin
gradient-orientation histogram, and the descriptor of a cell concatenates
the histograms of its 4x4-cell neighbourhood (128 dims, L2-normalized).
Exported CNN feature maps can be dropped in wherever a FeatureMap is
accepted; matching never looks at how descriptors were produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Correspondence, FeatureMap, Image, resize_to, to_gray

DEFAULT_SCALES = (0.5, 0.6, 0.88, 1.0, 1.33, 1.66, 2.0)
DESCRIPTOR_STRIDE = 8
_NEIGHBORHOOD = (-1, 0, 1, 2)  # 4x4 cell block anchored just before the cell
_N_BINS = 8


@dataclass(frozen=True)
class MatchConfig:
    scales: tuple[float, ...] = DEFAULT_SCALES
    min_score: float = 0.0
    descriptor_source: str = "builtin"  # builtin | file
    cross_scale: str = "all"            # all | same

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be non-empty and positive")
        if self.cross_scale not in ("all", "same"):
            raise ValueError("cross_scale must be 'all' or 'same'")


def extract_dense_descriptors(img: Image, scale: float) -> FeatureMap:
    """Stride-8 descriptor grid of the image resized by ``scale``.

    Cells with no gradient energy anywhere in their neighbourhood get a
    zero descriptor and are flagged invalid.
    """
    out_w = max(1, int(round(img.width * scale)))
    out_h = max(1, int(round(img.height * scale)))
    if min(out_w, out_h) < 32:
        raise ValueError(
            f"image too small for descriptor extraction at scale {scale} "
            f"({out_w}x{out_h}, need min side >= 32)")
    scaled = resize_to(img, out_w, out_h)
    gray = to_gray(scaled)

    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)  # [-pi, pi]
    bins = (np.floor((ang + np.pi) / (2 * np.pi / _N_BINS)).astype(np.int64)) % _N_BINS

    s = DESCRIPTOR_STRIDE
    gh, gw = out_h // s, out_w // s
    mag_c = mag[: gh * s, : gw * s].reshape(gh, s, gw, s)
    bin_c = bins[: gh * s, : gw * s].reshape(gh, s, gw, s)

    # per-cell 8-bin histogram via one bincount over (cell, bin) pairs
    cell_idx = (np.arange(gh)[:, None, None, None] * gw
                + np.arange(gw)[None, None, :, None])
    cell_idx = np.broadcast_to(cell_idx, bin_c.shape)
    flat = cell_idx.reshape(-1) * _N_BINS + bin_c.reshape(-1)
    hist = np.bincount(flat, weights=mag_c.reshape(-1), minlength=gh * gw * _N_BINS)
    hist = hist.reshape(gh, gw, _N_BINS)

    padded = np.zeros((gh + 4, gw + 4, _N_BINS))
    padded[1: gh + 1, 1: gw + 1] = hist
    blocks = [padded[1 + di: 1 + di + gh, 1 + dj: 1 + dj + gw]
              for di in _NEIGHBORHOOD for dj in _NEIGHBORHOOD]
    desc = np.concatenate(blocks, axis=2)

    norms = np.linalg.norm(desc, axis=2, keepdims=True)
    ok = norms[:, :, 0] > 1e-12
    desc = np.where(ok[:, :, None], desc / np.where(norms > 1e-12, norms, 1.0), 0.0)
    return FeatureMap(desc.astype(np.float32), stride=s, scale_factor=scale)


def extract_multiscale(img: Image, cfg: MatchConfig) -> list[FeatureMap]:
    return [extract_dense_descriptors(img, s) for s in cfg.scales]


def _flat_valid(fm: FeatureMap):
    valid = fm.valid
    idx = np.flatnonzero(valid.reshape(-1))
    data = fm.data.reshape(-1, fm.channels)[idx].astype(np.float32)
    cx, cy = fm.cell_centers()
    return data, cx.reshape(-1)[idx], cy.reshape(-1)[idx]


def mutual_nn_match(src_maps: list[FeatureMap], tgt_maps: list[FeatureMap],
                    cfg: MatchConfig) -> list[Correspondence]:
    """Mutual nearest-neighbour matches across scale pairs.

    A pair (p, q) survives only when q is p's best cosine match and p is
    q's best match; ties break toward the lowest linear cell index, which
    makes the result deterministic and symmetric under swapping source and
    target.  Duplicate matches landing on the same rounded pixel pair keep
    the highest score.  Coordinates are native (unscaled) pixels.
    """
    if len(src_maps) != len(tgt_maps):
        raise ValueError("need one target map per source map scale")
    candidates: list[Correspondence] = []
    n = len(src_maps)
    pairs = ([(a, b) for a in range(n) for b in range(n)]
             if cfg.cross_scale == "all" else [(a, a) for a in range(n)])
    for a, b in pairs:
        da, xa, ya = _flat_valid(src_maps[a])
        db, xb, yb = _flat_valid(tgt_maps[b])
        if len(da) == 0 or len(db) == 0:
            continue
        sim = da @ db.T
        nn_ab = np.argmax(sim, axis=1)
        nn_ba = np.argmax(sim, axis=0)
        ia = np.arange(len(da))
        mutual = nn_ba[nn_ab] == ia
        score = sim[ia, nn_ab].astype(np.float64)
        keep = mutual & (score >= cfg.min_score)
        for i in np.flatnonzero(keep):
            j = nn_ab[i]
            candidates.append(Correspondence(
                (float(xa[i]), float(ya[i])), (float(xb[j]), float(yb[j])),
                float(np.clip(score[i], -1.0, 1.0))))

    best: dict[tuple[int, int, int, int], Correspondence] = {}
    for c in candidates:
        key = (int(round(c.src[0])), int(round(c.src[1])),
               int(round(c.tgt[0])), int(round(c.tgt[1])))
        prev = best.get(key)
        if prev is None or c.score > prev.score:
            best[key] = c
    out = sorted(best.values(), key=lambda c: (c.src[1], c.src[0], c.tgt[1], c.tgt[0]))
    return out
