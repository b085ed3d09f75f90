"""Fine per-pixel alignment: objective, correlation volume and optimizer.

The objective couples three per-pixel terms over the target grid:

* reconstruction: cycle-matchability-weighted (1 - SSIM) between the
  backward-warped source and the target,
* matchability: |M_cycle - 1|, pulling the mask toward 1,
* cycle consistency: matchability-weighted distance of the round trip
  target -> source -> target from its starting pixel.

All sums run over valid target pixels and are normalized by the valid
pixel count, so the weights keep their meaning across image sizes.

Flow naming: ``flow_st`` warps the source into the target frame, so it is
defined on the target grid and stores absolute source sample coordinates;
``flow_ts`` is the mirror image.  Instead of a learned predictor the
objective is minimized per image pair over coarse 1/8-resolution
displacement and matchability-logit grids, bilinearly upsampled to full
resolution, with an explicit smoothness term standing in for the implicit
regularization a convolutional predictor would provide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .core import (FeatureMap, FlowField, Image, MatchabilityMap,
                   bilinear_neighbors, resize_to, to_gray)

COARSE_STRIDE = 8
DEFAULT_K = 3
_LUMA = np.asarray([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_match: float = 0.01
    mu_cycle: float = 1.0
    ssim_window: int = 11
    ssim_c1: float = 1e-4
    ssim_c2: float = 9e-4
    grayscale_ssim: bool = True
    direct_matchability: bool = False  # encourage m -> 1 directly instead of M_cycle

    def __post_init__(self):
        if self.lambda_match < 0 or self.mu_cycle < 0:
            raise ValueError("loss weights must be >= 0")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd and >= 3")


@dataclass(frozen=True)
class OptimizeSchedule:
    """Per-pair staged optimization mirroring the three training phases:
    reconstruction only, then + cycle, then all terms."""

    stage_lengths: tuple[int, int, int] = (300, 100, 100)
    step_size: float = 0.5
    step_decay: float = 0.99

    def __post_init__(self):
        if any(n < 0 for n in self.stage_lengths):
            raise ValueError("stage lengths must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")


@dataclass(frozen=True, eq=False)
class FlowParams:
    """Coarse 1/8-resolution parameterization of one flow direction."""

    grid: np.ndarray        # (gh, gw, 2) displacement in pixels
    match_grid: np.ndarray  # (gh, gw) matchability logits
    smoothness_weight: float = 0.05

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        m = np.asarray(self.match_grid, dtype=np.float64)
        if g.ndim != 3 or g.shape[2] != 2 or m.shape != g.shape[:2]:
            raise ValueError("grid must be (gh, gw, 2) with matching match_grid")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "match_grid", m)


def coarse_grid_shape(width: int, height: int) -> tuple[int, int]:
    return (math.ceil(height / COARSE_STRIDE), math.ceil(width / COARSE_STRIDE))


# ---------------------------------------------------------------------------
# correlation volume (local cosine similarity tensor)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CorrelationVolume:
    """Per-cell cosine similarities against a (2K+1)^2 neighbourhood.

    Channel (m + K) * (2K + 1) + (n + K) holds cos(A(i, j), B(i - m, j - n));
    out-of-grid or invalid-descriptor entries carry the -1 sentinel and are
    False in ``valid``.
    """

    values: np.ndarray  # (gh, gw, (2K+1)^2)
    valid: np.ndarray   # same shape, bool
    k: int
    stride: int

    def __post_init__(self):
        if self.values.shape != self.valid.shape:
            raise ValueError("values/valid shape mismatch")
        if self.values.shape[2] != (2 * self.k + 1) ** 2:
            raise ValueError("channel count must be (2K+1)^2")

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]


def correlation_volume(src_fm: FeatureMap, tgt_fm: FeatureMap,
                       k: int = DEFAULT_K) -> CorrelationVolume:
    """Cosine similarity of each src cell against tgt cells offset by
    (m, n) for m, n in [-K..K]."""
    if (src_fm.grid_h, src_fm.grid_w) != (tgt_fm.grid_h, tgt_fm.grid_w):
        raise ValueError("feature grids differ in size")
    if src_fm.channels != tgt_fm.channels:
        raise ValueError("feature grids differ in channel count")
    gh, gw = src_fm.grid_h, src_fm.grid_w
    a = src_fm.data.astype(np.float64)
    b = tgt_fm.data.astype(np.float64)
    na = np.linalg.norm(a, axis=2)
    nb = np.linalg.norm(b, axis=2)
    va = na > 1e-12
    vb = nb > 1e-12
    an = a / np.where(va, na, 1.0)[:, :, None]
    bn = b / np.where(vb, nb, 1.0)[:, :, None]

    side = 2 * k + 1
    vals = np.full((gh, gw, side * side), -1.0)
    valid = np.zeros((gh, gw, side * side), dtype=bool)
    for m in range(-k, k + 1):
        for n in range(-k, k + 1):
            ch = (m + k) * side + (n + k)
            r0, r1 = max(0, m), gh + min(0, m)
            c0, c1 = max(0, n), gw + min(0, n)
            if r0 >= r1 or c0 >= c1:
                continue
            dot = np.einsum("ijc,ijc->ij",
                            an[r0:r1, c0:c1], bn[r0 - m:r1 - m, c0 - n:c1 - n])
            ok = va[r0:r1, c0:c1] & vb[r0 - m:r1 - m, c0 - n:c1 - n]
            vals[r0:r1, c0:c1, ch] = np.where(ok, np.clip(dot, -1.0, 1.0), -1.0)
            valid[r0:r1, c0:c1, ch] = ok
    return CorrelationVolume(vals, valid, k=k, stride=src_fm.stride)


def init_flow_from_correlation(vol: CorrelationVolume) -> np.ndarray:
    """Per-cell displacement (pixels) toward the best-matching neighbour.

    Ties break toward the smallest |offset| then lexicographic (m, n);
    cells whose best value is negative (including sentinel-only cells) get
    zero displacement.
    """
    side = 2 * vol.k + 1
    offsets = sorted(((m, n) for m in range(-vol.k, vol.k + 1)
                      for n in range(-vol.k, vol.k + 1)),
                     key=lambda mn: (mn[0] ** 2 + mn[1] ** 2, mn[0], mn[1]))
    perm = [(m + vol.k) * side + (n + vol.k) for m, n in offsets]
    reordered = vol.values[:, :, perm]
    best = reordered.max(axis=2)
    first = np.argmax(reordered == best[:, :, None], axis=2)
    ms = np.asarray([mn[0] for mn in offsets])[first]
    ns = np.asarray([mn[1] for mn in offsets])[first]
    disp = np.stack([-ns * float(vol.stride), -ms * float(vol.stride)], axis=2)
    disp[best < 0] = 0.0
    return disp


# ---------------------------------------------------------------------------
# Gaussian windowing with exact adjoints
# ---------------------------------------------------------------------------

def gaussian_kernel(size: int, sigma: float = 1.5) -> np.ndarray:
    r = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - r
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _conv1d_edge(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    """Correlate along one axis with edge-replicated padding (length kept)."""
    return correlate1d(x, k, axis=axis, mode="nearest")


def _conv1d_edge_adjoint(g: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    """Exact adjoint of ``_conv1d_edge`` for a symmetric kernel.

    The interior of the adjoint equals zero-padded correlation; the tails
    of the transpose scatter fold back onto the border elements.
    """
    r = (len(k) - 1) // 2
    n = g.shape[axis]
    if n <= r:
        return _conv1d_edge_adjoint_slow(g, k, axis)
    out = correlate1d(g, k, axis=axis, mode="constant", cval=0.0)
    c = np.cumsum(k)[:r][::-1]  # c[i] = sum_{j <= r-1-i} k_j
    gm = np.moveaxis(g, axis, 0)
    om = np.moveaxis(out, axis, 0)
    om[0] += np.tensordot(c, gm[:r], axes=(0, 0))
    om[-1] += np.tensordot(c, gm[n - r:][::-1], axes=(0, 0))
    return out


def _conv1d_edge_adjoint_slow(g: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = (len(k) - 1) // 2
    gm = np.moveaxis(g, axis, 0)
    n = gm.shape[0]
    zp = np.zeros((n + 2 * r,) + gm.shape[1:], dtype=np.float64)
    for j, kj in enumerate(k):
        zp[j:j + n] += kj * gm
    out = zp[r:r + n].copy()
    out[0] += zp[:r].sum(axis=0)
    out[-1] += zp[r + n:].sum(axis=0)
    return np.moveaxis(out, 0, axis)


def _gfilter(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    return _conv1d_edge(_conv1d_edge(x, k, 0), k, 1)


def _gfilter_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    return _conv1d_edge_adjoint(_conv1d_edge_adjoint(g, k, 1), k, 0)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _ssim_b_stats(b: np.ndarray, k: np.ndarray):
    """Window statistics of the constant comparison image."""
    return _gfilter(b, k), _gfilter(b * b, k)


def _ssim_forward(a: np.ndarray, b: np.ndarray, k: np.ndarray,
                  c1: float, c2: float, need_cache: bool,
                  b_stats=None):
    m1 = _gfilter(a, k)
    if b_stats is None:
        b_stats = _ssim_b_stats(b, k)
    m2, u22 = b_stats
    u11 = _gfilter(a * a, k)
    u12 = _gfilter(a * b, k)
    s11 = u11 - m1 * m1
    s22 = u22 - m2 * m2
    s12 = u12 - m1 * m2
    n1 = 2.0 * m1 * m2 + c1
    d1 = m1 * m1 + m2 * m2 + c1
    n2 = 2.0 * s12 + c2
    d2 = s11 + s22 + c2
    s = (n1 * n2) / (d1 * d2)
    if not need_cache:
        return s, None
    return s, (a, b, m1, m2, n1, d1, n2, d2, s)


def _ssim_backward(gs: np.ndarray, cache, k: np.ndarray) -> np.ndarray:
    a, b, m1, m2, n1, d1, n2, d2, s = cache
    dd = d1 * d2
    ds_dn1 = n2 / dd
    ds_dd1 = -s / d1
    ds_dn2 = n1 / dd
    ds_dd2 = -s / d2
    ds_dm1 = ds_dn1 * 2.0 * m2 + ds_dd1 * 2.0 * m1
    ds_ds12 = ds_dn2 * 2.0
    ds_ds11 = ds_dd2
    # s11 = G(a^2) - m1^2, s12 = G(ab) - m1 m2
    ds_dm1 = ds_dm1 - 2.0 * m1 * ds_ds11 - m2 * ds_ds12
    ga = _gfilter_adjoint(gs * ds_dm1, k)
    ga += 2.0 * a * _gfilter_adjoint(gs * ds_ds11, k)
    ga += b * _gfilter_adjoint(gs * ds_ds12, k)
    return ga


def ssim_map(a: Image, b: Image, cfg: ObjectiveConfig) -> np.ndarray:
    """Per-pixel structural similarity in [-1, 1] (Gaussian window, sigma 1.5)."""
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError("ssim_map requires equal image sizes")
    if a.channels != b.channels:
        raise ValueError("ssim_map requires equal channel counts")
    k = gaussian_kernel(cfg.ssim_window)
    if cfg.grayscale_ssim or a.channels == 1:
        s, _ = _ssim_forward(to_gray(a), to_gray(b), k, cfg.ssim_c1, cfg.ssim_c2, False)
        return s
    acc = np.zeros((a.height, a.width))
    for c in range(a.channels):
        s, _ = _ssim_forward(a.data[:, :, c], b.data[:, :, c], k,
                             cfg.ssim_c1, cfg.ssim_c2, False)
        acc += s
    return acc / a.channels


# ---------------------------------------------------------------------------
# cycle-consistent matchability
# ---------------------------------------------------------------------------

def _gather2d(arr: np.ndarray, px: np.ndarray, py: np.ndarray):
    h, w = arr.shape
    x0, y0, fx, fy, inb = bilinear_neighbors(w, h, px, py)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    vals = (arr[y0, x0] * (1 - fx) * (1 - fy) + arr[y0, x1] * fx * (1 - fy)
            + arr[y1, x0] * (1 - fx) * fy + arr[y1, x1] * fx * fy)
    return vals, inb


def cycle_matchability(m_src: MatchabilityMap, m_tgt: MatchabilityMap,
                       flow: FlowField) -> MatchabilityMap:
    """M_cycle(x, y) = m_tgt(x, y) * m_src(flow(x, y)).

    ``flow`` lives on the target grid and stores source sample locations;
    samples falling outside the source grid (or invalid flow pixels)
    contribute 0.
    """
    if (flow.height, flow.width) != (m_tgt.height, m_tgt.width):
        raise ValueError("flow and target matchability grids differ")
    samp, inb = _gather2d(m_src.values, flow.map_xy[:, :, 0], flow.map_xy[:, :, 1])
    out = np.where(inb & flow.valid, m_tgt.values * samp, 0.0)
    return MatchabilityMap(out)


# ---------------------------------------------------------------------------
# the loss core (shared by the public objective and the optimizer)
# ---------------------------------------------------------------------------

def _scatter_add(acc: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                 vals: np.ndarray) -> None:
    h, w = acc.shape
    flat = np.bincount((ys * w + xs).ravel(), weights=vals.ravel(), minlength=h * w)
    acc += flat.reshape(h, w)


class _LossResult:
    __slots__ = ("total", "ssim", "match", "cycle", "valid_count",
                 "g_map_st", "g_map_ts", "g_m_src", "g_m_tgt")

    def __init__(self, total, ssim, match, cycle, valid_count,
                 g_map_st=None, g_map_ts=None, g_m_src=None, g_m_tgt=None):
        self.total = total
        self.ssim = ssim
        self.match = match
        self.cycle = cycle
        self.valid_count = valid_count
        self.g_map_st = g_map_st
        self.g_map_ts = g_map_ts
        self.g_m_src = g_m_src
        self.g_m_tgt = g_m_tgt


def _loss_core(src_data: np.ndarray, tgt_data: np.ndarray,
               map_st: np.ndarray, st_valid: Optional[np.ndarray],
               map_ts: np.ndarray, ts_valid: Optional[np.ndarray],
               m_src: np.ndarray, m_tgt: np.ndarray,
               cfg: ObjectiveConfig, lam: float, mu: float,
               frozen_mask: bool = False,
               src_content_valid: Optional[np.ndarray] = None,
               tgt_content_valid: Optional[np.ndarray] = None,
               need_grad: bool = False,
               ssim_b_stats=None) -> _LossResult:
    hs, ws = src_data.shape[:2]
    ht, wt = tgt_data.shape[:2]
    n_channels = src_data.shape[2]
    px = map_st[:, :, 0]
    py = map_st[:, :, 1]
    x0, y0, fx, fy, inb = bilinear_neighbors(ws, hs, px, py)
    x1 = np.minimum(x0 + 1, ws - 1)
    y1 = np.minimum(y0 + 1, hs - 1)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy

    # one stacked gather serves image channels, m_src, the round-trip map
    # and the validity planes
    planes = [src_data[:, :, c] for c in range(n_channels)]
    planes += [m_src, map_ts[:, :, 0], map_ts[:, :, 1]]
    i_msrc, i_tsx, i_tsy = n_channels, n_channels + 1, n_channels + 2
    i_scv = i_tsv = None
    if src_content_valid is not None:
        i_scv = len(planes)
        planes.append(src_content_valid.astype(np.float64))
    if ts_valid is not None:
        i_tsv = len(planes)
        planes.append(ts_valid.astype(np.float64))
    stack = np.stack(planes, axis=2)
    v00 = stack[y0, x0]
    v01 = stack[y0, x1]
    v10 = stack[y1, x0]
    v11 = stack[y1, x1]
    vals = (v00 * w00[:, :, None] + v01 * w01[:, :, None]
            + v10 * w10[:, :, None] + v11 * w11[:, :, None])

    v = inb.copy()
    if st_valid is not None:
        v &= st_valid
    if tgt_content_valid is not None:
        v &= tgt_content_valid
    if i_scv is not None:
        v &= ((v00[:, :, i_scv] > 0.5) & (v01[:, :, i_scv] > 0.5)
              & (v10[:, :, i_scv] > 0.5) & (v11[:, :, i_scv] > 0.5))
    n_valid = int(v.sum())
    if n_valid == 0:
        zg = ((np.zeros_like(map_st), np.zeros_like(map_ts),
               np.zeros_like(m_src), np.zeros_like(m_tgt))
              if need_grad else (None,) * 4)
        return _LossResult(0.0, 0.0, 0.0, 0.0, 0, *zg)

    # --- reconstruction -----------------------------------------------------
    k = gaussian_kernel(cfg.ssim_window)
    gray_mode = cfg.grayscale_ssim or n_channels == 1
    if gray_mode:
        lw = np.asarray([1.0]) if n_channels == 1 else _LUMA
        a_raw = vals[:, :, :n_channels] @ lw
        b_img = tgt_data[:, :, 0] if n_channels == 1 else tgt_data @ lw
        ssim_planes = [(np.where(v, a_raw, b_img), b_img)]
    else:
        ssim_planes = [(np.where(v, vals[:, :, c], tgt_data[:, :, c]),
                        tgt_data[:, :, c]) for c in range(n_channels)]

    s_acc = np.zeros((ht, wt))
    caches = []
    for ci, (ai, bi) in enumerate(ssim_planes):
        bs = ssim_b_stats[ci] if ssim_b_stats is not None else None
        s_i, cache = _ssim_forward(ai, bi, k, cfg.ssim_c1, cfg.ssim_c2,
                                   need_grad, b_stats=bs)
        s_acc += s_i
        caches.append(cache)
    s_map = s_acc / len(ssim_planes)

    # --- cycle-consistent matchability ---------------------------------------
    msrc_samp = vals[:, :, i_msrc]
    m2 = np.where(v, m_tgt * msrc_samp, 0.0)
    meff = np.ones_like(m2) if frozen_mask else m2

    # --- cycle term -----------------------------------------------------------
    xs_t, ys_t = np.meshgrid(np.arange(wt, dtype=np.float64),
                             np.arange(ht, dtype=np.float64))
    rx = vals[:, :, i_tsx]
    ry = vals[:, :, i_tsy]
    cv = v.copy()
    if i_tsv is not None:
        cv &= ((v00[:, :, i_tsv] > 0.5) & (v01[:, :, i_tsv] > 0.5)
               & (v10[:, :, i_tsv] > 0.5) & (v11[:, :, i_tsv] > 0.5))
    vx = rx - xs_t
    vy = ry - ys_t
    cdist = np.hypot(vx, vy)

    inv_n = 1.0 / n_valid
    l_ssim = float(np.sum(np.where(v, meff * (1.0 - s_map), 0.0)) * inv_n)
    l_cycle = float(np.sum(np.where(cv, meff * cdist, 0.0)) * inv_n)
    if cfg.direct_matchability:
        l_match = float(np.sum(np.where(v, np.abs(m_tgt - 1.0), 0.0)) * inv_n)
    else:
        l_match = float(np.sum(np.where(v, np.abs(m2 - 1.0), 0.0)) * inv_n)
    total = l_ssim + lam * l_match + mu * l_cycle
    if not need_grad:
        return _LossResult(total, l_ssim, l_match, l_cycle, n_valid)

    # --- backward ---------------------------------------------------------------
    g_px = np.zeros((ht, wt))
    g_py = np.zeros((ht, wt))
    g_m_src = np.zeros_like(m_src)
    g_m_tgt = np.zeros_like(m_tgt)
    g_map_ts = np.zeros_like(map_ts)

    one_m_fy = (1 - fy)
    one_m_fx = (1 - fx)

    def plane_derivs(idx):
        dx = one_m_fy * (v01[:, :, idx] - v00[:, :, idx]) \
            + fy * (v11[:, :, idx] - v10[:, :, idx])
        dy = one_m_fx * (v10[:, :, idx] - v00[:, :, idx]) \
            + fx * (v11[:, :, idx] - v01[:, :, idx])
        return dx, dy

    # ssim -> warped image -> sample position
    gs_map = np.where(v, -meff * inv_n, 0.0) / len(ssim_planes)
    for ci in range(len(ssim_planes)):
        ga = _ssim_backward(gs_map, caches[ci], k)
        ga = np.where(v, ga, 0.0)  # fill pixels carry no parameters
        if gray_mode:
            for c in range(n_channels):
                dwdx, dwdy = plane_derivs(c)
                g_px += (lw[c] * ga) * dwdx
                g_py += (lw[c] * ga) * dwdy
        else:
            dwdx, dwdy = plane_derivs(ci)
            g_px += ga * dwdx
            g_py += ga * dwdy

    # cycle -> round-trip sample and map_ts
    gc = np.where(cv, meff * (mu * inv_n), 0.0)
    nz = cdist > 1e-12
    safe = np.where(nz, cdist, 1.0)
    gvx = np.where(nz, gc * vx / safe, 0.0)
    gvy = np.where(nz, gc * vy / safe, 0.0)
    for idx, gcomp in ((i_tsx, gvx), (i_tsy, gvy)):
        drdx, drdy = plane_derivs(idx)
        g_px += gcomp * drdx
        g_py += gcomp * drdy
        acc = g_map_ts[:, :, idx - i_tsx]
        _scatter_add(acc, y0, x0, gcomp * w00)
        _scatter_add(acc, y0, x1, gcomp * w01)
        _scatter_add(acc, y1, x0, gcomp * w10)
        _scatter_add(acc, y1, x1, gcomp * w11)

    # matchability gradients (silent in frozen stages)
    if not frozen_mask:
        g_m2 = np.where(v, (1.0 - s_map) * inv_n, 0.0)
        g_m2 += np.where(cv, (mu * inv_n) * cdist, 0.0)
        if cfg.direct_matchability:
            g_m_tgt += np.where(v, (lam * inv_n) * np.sign(m_tgt - 1.0), 0.0)
        else:
            g_m2 += np.where(v, (lam * inv_n) * np.sign(m2 - 1.0), 0.0)
        g_m_tgt += np.where(v, g_m2 * msrc_samp, 0.0)
        g_samp = np.where(v, g_m2 * m_tgt, 0.0)
        _scatter_add(g_m_src, y0, x0, g_samp * w00)
        _scatter_add(g_m_src, y0, x1, g_samp * w01)
        _scatter_add(g_m_src, y1, x0, g_samp * w10)
        _scatter_add(g_m_src, y1, x1, g_samp * w11)
        dmdx, dmdy = plane_derivs(i_msrc)
        g_px += g_samp * dmdx
        g_py += g_samp * dmdy

    g_map_st = np.stack([g_px, g_py], axis=2)
    return _LossResult(total, l_ssim, l_match, l_cycle, n_valid,
                       g_map_st, g_map_ts, g_m_src, g_m_tgt)


def total_loss(src: Image, tgt: Image,
               flow_st: FlowField, flow_ts: FlowField,
               match_src: MatchabilityMap, match_tgt: MatchabilityMap,
               cfg: ObjectiveConfig) -> tuple[float, dict]:
    """Combined objective for the source-to-target direction.

    ``flow_st`` lives on the target grid (source sample locations),
    ``flow_ts`` on the source grid; ``match_src``/``match_tgt`` follow
    their grids.  Returns (total, per-term breakdown).
    """
    if src.channels != tgt.channels:
        raise ValueError("images differ in channel count")
    if (flow_st.height, flow_st.width) != (tgt.height, tgt.width):
        raise ValueError("flow_st must live on the target grid")
    if (flow_ts.height, flow_ts.width) != (src.height, src.width):
        raise ValueError("flow_ts must live on the source grid")
    if (match_src.height, match_src.width) != (src.height, src.width):
        raise ValueError("match_src must live on the source grid")
    if (match_tgt.height, match_tgt.width) != (tgt.height, tgt.width):
        raise ValueError("match_tgt must live on the target grid")
    res = _loss_core(src.data, tgt.data, flow_st.map_xy, flow_st.valid,
                     flow_ts.map_xy, flow_ts.valid,
                     match_src.values, match_tgt.values,
                     cfg, cfg.lambda_match, cfg.mu_cycle)
    return res.total, {"ssim": res.ssim, "match": res.match,
                       "cycle": res.cycle, "valid_count": res.valid_count}


# ---------------------------------------------------------------------------
# coarse-grid parameterization
# ---------------------------------------------------------------------------

def _upsample_matrix(n_full: int, n_coarse: int, stride: int = COARSE_STRIDE) -> np.ndarray:
    m = np.zeros((n_full, n_coarse))
    if n_coarse == 1:
        m[:, 0] = 1.0
        return m
    pos = np.clip(np.arange(n_full, dtype=np.float64) / stride, 0, n_coarse - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_coarse - 2)
    f = pos - i0
    rows = np.arange(n_full)
    m[rows, i0] = 1.0 - f
    m[rows, i0 + 1] += f
    return m


class _Upsampler:
    """Bilinear coarse -> full interpolation and its exact adjoint."""

    def __init__(self, width: int, height: int):
        gh, gw = coarse_grid_shape(width, height)
        self.gh, self.gw = gh, gw
        self.my = _upsample_matrix(height, gh)
        self.mx = _upsample_matrix(width, gw)

    def up(self, coarse: np.ndarray) -> np.ndarray:
        if coarse.ndim == 2:
            return self.my @ coarse @ self.mx.T
        return np.stack([self.my @ coarse[:, :, c] @ self.mx.T
                         for c in range(coarse.shape[2])], axis=2)

    def down_adjoint(self, g_full: np.ndarray) -> np.ndarray:
        if g_full.ndim == 2:
            return self.my.T @ g_full @ self.mx
        return np.stack([self.my.T @ g_full[:, :, c] @ self.mx
                         for c in range(g_full.shape[2])], axis=2)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _smoothness(grid: np.ndarray, weight: float):
    """Mean squared displacement gradient (px of change per px of image).

    Normalizing by the neighbour-pair count and the coarse stride keeps the
    term comparable to the per-pixel data terms regardless of image size,
    so a genuinely varying flow is damped but not flattened.
    """
    dh = grid[:, 1:] - grid[:, :-1]
    dv = grid[1:, :] - grid[:-1, :]
    n_pairs = max(dh[..., 0].size + dv[..., 0].size, 1)
    scale = weight / (n_pairs * COARSE_STRIDE ** 2)
    val = scale * (float(np.sum(dh ** 2)) + float(np.sum(dv ** 2)))
    g = np.zeros_like(grid)
    g[:, 1:] += 2.0 * scale * dh
    g[:, :-1] -= 2.0 * scale * dh
    g[1:, :] += 2.0 * scale * dv
    g[:-1, :] -= 2.0 * scale * dv
    return val, g


@dataclass(frozen=True)
class FineFlowResult:
    flow_st: FlowField            # target grid -> source sample locations
    flow_ts: FlowField            # source grid -> target sample locations
    match_src: MatchabilityMap    # source grid
    match_tgt: MatchabilityMap    # target grid
    trace: list


_INIT_LOGIT = 2.0  # sigmoid(2) ~ 0.88


class _JointState:
    """The four coarse grids optimized jointly for one image pair."""

    __slots__ = ("d_tgt", "l_tgt", "d_src", "l_src")

    def __init__(self, d_tgt, l_tgt, d_src, l_src):
        self.d_tgt = d_tgt
        self.l_tgt = l_tgt
        self.d_src = d_src
        self.l_src = l_src

    def arrays(self):
        return (self.d_tgt, self.l_tgt, self.d_src, self.l_src)

    def moved(self, deltas):
        return _JointState(self.d_tgt - deltas[0], self.l_tgt - deltas[1],
                           self.d_src - deltas[2], self.l_src - deltas[3])


def _fields_from_state(state: _JointState, up_t: _Upsampler, up_s: _Upsampler,
                       wt: int, ht: int, ws: int, hs: int):
    xs_t, ys_t = np.meshgrid(np.arange(wt, dtype=np.float64),
                             np.arange(ht, dtype=np.float64))
    xs_s, ys_s = np.meshgrid(np.arange(ws, dtype=np.float64),
                             np.arange(hs, dtype=np.float64))
    d_t = up_t.up(state.d_tgt)
    d_s = up_s.up(state.d_src)
    map_st = np.stack([xs_t + d_t[:, :, 0], ys_t + d_t[:, :, 1]], axis=2)
    map_ts = np.stack([xs_s + d_s[:, :, 0], ys_s + d_s[:, :, 1]], axis=2)
    m_tgt = _sigmoid(up_t.up(state.l_tgt))
    m_src = _sigmoid(up_s.up(state.l_src))
    return map_st, map_ts, m_src, m_tgt


def _joint_objective(state: _JointState, src_data, tgt_data, src_valid, tgt_valid,
                     up_t: _Upsampler, up_s: _Upsampler, cfg: ObjectiveConfig,
                     lam: float, mu: float, frozen: bool, smooth_w: float,
                     need_grad: bool, b_stats_pair=None):
    hs, ws = src_data.shape[:2]
    ht, wt = tgt_data.shape[:2]
    map_st, map_ts, m_src, m_tgt = _fields_from_state(state, up_t, up_s,
                                                      wt, ht, ws, hs)

    bs1 = b_stats_pair[0] if b_stats_pair is not None else None
    bs2 = b_stats_pair[1] if b_stats_pair is not None else None
    d1 = _loss_core(src_data, tgt_data, map_st, None, map_ts, None,
                    m_src, m_tgt, cfg, lam, mu, frozen,
                    src_content_valid=src_valid, tgt_content_valid=tgt_valid,
                    need_grad=need_grad, ssim_b_stats=bs1)
    d2 = _loss_core(tgt_data, src_data, map_ts, None, map_st, None,
                    m_tgt, m_src, cfg, lam, mu, frozen,
                    src_content_valid=tgt_valid, tgt_content_valid=src_valid,
                    need_grad=need_grad, ssim_b_stats=bs2)
    sm_t, gsm_t = _smoothness(state.d_tgt, smooth_w)
    sm_s, gsm_s = _smoothness(state.d_src, smooth_w)
    total = d1.total + d2.total + sm_t + sm_s
    terms = {"ssim": d1.ssim + d2.ssim, "match": d1.match + d2.match,
             "cycle": d1.cycle + d2.cycle, "smooth": sm_t + sm_s, "total": total}
    if not need_grad:
        return total, terms, None

    g_map_st = d1.g_map_st + d2.g_map_ts
    g_map_ts = d1.g_map_ts + d2.g_map_st
    g_m_src = d1.g_m_src + d2.g_m_tgt
    g_m_tgt = d1.g_m_tgt + d2.g_m_src

    g_d_tgt = up_t.down_adjoint(g_map_st) + gsm_t
    g_d_src = up_s.down_adjoint(g_map_ts) + gsm_s
    g_l_tgt = up_t.down_adjoint(g_m_tgt * m_tgt * (1.0 - m_tgt))
    g_l_src = up_s.down_adjoint(g_m_src * m_src * (1.0 - m_src))
    return total, terms, (g_d_tgt, g_l_tgt, g_d_src, g_l_src)


def _median3(grid: np.ndarray) -> np.ndarray:
    """3x3 median filter (edge-padded), applied per component.

    Removes isolated argmax outliers from the correlation init so the
    smoothness energy of the starting point stays small."""
    if grid.shape[0] < 2 or grid.shape[1] < 2:
        return grid
    p = np.pad(grid, ((1, 1), (1, 1), (0, 0)), mode="edge")
    stack = [p[1 + di:1 + di + grid.shape[0], 1 + dj:1 + dj + grid.shape[1]]
             for di in (-1, 0, 1) for dj in (-1, 0, 1)]
    return np.median(np.stack(stack), axis=0)


def _fit_grid(grid: np.ndarray, gh: int, gw: int) -> np.ndarray:
    """Edge-pad or crop a coarse grid to the requested shape."""
    out = grid[:gh, :gw]
    if out.shape[0] < gh:
        out = np.concatenate([out, np.repeat(out[-1:], gh - out.shape[0], axis=0)], axis=0)
    if out.shape[1] < gw:
        out = np.concatenate([out, np.repeat(out[:, -1:], gw - out.shape[1], axis=1)], axis=1)
    return np.ascontiguousarray(out, dtype=np.float64)


def _init_state(src: Image, tgt: Image,
                src_fm: Optional[FeatureMap], tgt_fm: Optional[FeatureMap]) -> _JointState:
    gh_t, gw_t = coarse_grid_shape(tgt.width, tgt.height)
    gh_s, gw_s = coarse_grid_shape(src.width, src.height)
    d_tgt = np.zeros((gh_t, gw_t, 2))
    d_src = np.zeros((gh_s, gw_s, 2))
    if src_fm is not None and tgt_fm is not None:
        d_tgt = _fit_grid(_median3(init_flow_from_correlation(
            correlation_volume(tgt_fm, src_fm, DEFAULT_K))), gh_t, gw_t)
        d_src = _fit_grid(_median3(init_flow_from_correlation(
            correlation_volume(src_fm, tgt_fm, DEFAULT_K))), gh_s, gw_s)
    return _JointState(d_tgt, np.full((gh_t, gw_t), _INIT_LOGIT),
                       d_src, np.full((gh_s, gw_s), _INIT_LOGIT))


_STAGES = (  # (use lambda, use mu, matchability live)
    (False, False, False),
    (False, True, False),
    (True, True, True),
)


def _make_objective(src: Image, tgt: Image, src_valid, up_t, up_s,
                    cfg: ObjectiveConfig, smoothness_weight: float):
    # window statistics of the constant comparison image, per direction
    k = gaussian_kernel(cfg.ssim_window)
    gray_mode = cfg.grayscale_ssim or src.channels == 1
    if gray_mode:
        stats_1 = [_ssim_b_stats(to_gray(tgt), k)]
        stats_2 = [_ssim_b_stats(to_gray(src), k)]
    else:
        stats_1 = [_ssim_b_stats(tgt.data[:, :, c], k) for c in range(tgt.channels)]
        stats_2 = [_ssim_b_stats(src.data[:, :, c], k) for c in range(src.channels)]
    b_stats_pair = (stats_1, stats_2)

    def objective(st, lam, mu, frozen, need_grad):
        return _joint_objective(st, src.data, tgt.data, src_valid, None,
                                up_t, up_s, cfg, lam, mu, frozen,
                                smoothness_weight, need_grad,
                                b_stats_pair=b_stats_pair)

    return objective


def _descend_stage(state: _JointState, objective, lam, mu, frozen,
                   n_iters: int, step: float, decay: float,
                   trace: Optional[list], stage_no: int, it_start: int):
    """Monotone gradient descent: the candidate move scales the gradient so
    the largest entry changes by step * factor; rejected trials are halved
    (adaptive starting factor), accepted losses never increase the stage
    objective beyond the 1e-6 tolerance."""
    cur, terms, grads = objective(state, lam, mu, frozen, True)
    it = it_start
    factor0 = 1.0
    for _ in range(n_iters):
        it += 1
        gmax = max(float(np.max(np.abs(g))) for g in grads)
        if gmax >= 1e-15:
            factor = factor0
            accepted = False
            for _attempt in range(10):
                cand = state.moved([(step * factor / gmax) * g for g in grads])
                cand_loss, _, _ = objective(cand, lam, mu, frozen, False)
                if cand_loss <= cur + 1e-6:
                    state = cand
                    cur, terms, grads = objective(state, lam, mu, frozen, True)
                    accepted = True
                    break
                factor *= 0.5
            # remember how far backtracking had to go; probe upward again
            factor0 = min(factor * 2.0, 8.0) if accepted else max(factor, 1e-3)
        step *= decay
        if trace is not None:
            trace.append({"iteration": it, "stage": stage_no, **terms})
    return state, step, it


def _warm_start_state(src: Image, tgt: Image, cfg: ObjectiveConfig,
                      schedule: OptimizeSchedule, src_valid, smoothness_weight,
                      iters: int = 60) -> _JointState:
    """Half-resolution reconstruction-only pass to bridge displacements
    beyond the SSIM pull-in range, followed by a 2x displacement upscale."""
    hw, hh = max(8, src.width // 2), max(8, src.height // 2)
    src2 = resize_to(src, hw, hh)
    tgt2 = resize_to(tgt, hw, hh)
    sv2 = None
    if src_valid is not None:
        v2, _ = _gather2d(src_valid.astype(np.float64),
                          *np.meshgrid((np.arange(hw) + 0.5) * src.width / hw - 0.5,
                                       (np.arange(hh) + 0.5) * src.height / hh - 0.5))
        sv2 = v2 > 0.999
    try:
        sfm = extract_like(src2)
        tfm = extract_like(tgt2)
    except ValueError:
        sfm = tfm = None
    state = _init_state(src2, tgt2, sfm, tfm)
    up_t2 = _Upsampler(hw, hh)
    up_s2 = _Upsampler(hw, hh)
    objective = _make_objective(src2, tgt2, sv2, up_t2, up_s2, cfg, smoothness_weight)
    state, _, _ = _descend_stage(state, objective, 0.0, 0.0, True, iters,
                                 schedule.step_size, schedule.step_decay,
                                 None, 0, 0)
    gh_t, gw_t = coarse_grid_shape(tgt.width, tgt.height)
    gh_s, gw_s = coarse_grid_shape(src.width, src.height)

    def up2(grid, gh, gw):
        return _fit_grid(np.repeat(np.repeat(grid * 2.0, 2, axis=0), 2, axis=1), gh, gw)

    return _JointState(up2(state.d_tgt, gh_t, gw_t), np.full((gh_t, gw_t), _INIT_LOGIT),
                       up2(state.d_src, gh_s, gw_s), np.full((gh_s, gw_s), _INIT_LOGIT))


def extract_like(img: Image):
    # local import keeps features -> fineflow dependency one-way
    from .features import extract_dense_descriptors
    return extract_dense_descriptors(img, 1.0)


def optimize_fine_flow(src: Image, tgt: Image,
                       src_fm: Optional[FeatureMap], tgt_fm: Optional[FeatureMap],
                       cfg: ObjectiveConfig,
                       schedule: OptimizeSchedule = OptimizeSchedule(),
                       src_valid: Optional[np.ndarray] = None,
                       smoothness_weight: float = 0.05,
                       warm_start: bool = True) -> FineFlowResult:
    """Optimize both directional flows and matchabilities for one pair.

    Initialization: a half-resolution reconstruction-only warm start (plus
    median-filtered correlation-volume argmax displacements when feature
    maps are given), matchability logits at +2.  Descent is monotone
    gradient descent with an infinity-norm step in pixel units; every move
    is accepted only if the stage objective does not increase by more than
    1e-6 and rejected trials are halved, so each stage's loss trace is
    non-increasing by construction.  Stages: reconstruction only, + cycle,
    then all terms with the matchability live.  ``src_valid`` masks source
    pixels that hold no real content (for homography-warped inputs).
    """
    if (src.height, src.width) != (tgt.height, tgt.width):
        raise ValueError("optimize_fine_flow requires equally sized images")
    if src.channels != tgt.channels:
        raise ValueError("images differ in channel count")
    up_t = _Upsampler(tgt.width, tgt.height)
    up_s = _Upsampler(src.width, src.height)

    state = _init_state(src, tgt, src_fm, tgt_fm)
    if warm_start and min(src.width, src.height) >= 16:
        warm = _warm_start_state(src, tgt, cfg, schedule, src_valid,
                                 smoothness_weight)
        if src_fm is not None and tgt_fm is not None:
            # keep whichever init the reconstruction term prefers
            objective = _make_objective(src, tgt, src_valid, up_t, up_s, cfg,
                                        smoothness_weight)
            l_corr, _, _ = objective(state, 0.0, 0.0, True, False)
            l_warm, _, _ = objective(warm, 0.0, 0.0, True, False)
            state = warm if l_warm <= l_corr else state
        else:
            state = warm

    objective = _make_objective(src, tgt, src_valid, up_t, up_s, cfg,
                                smoothness_weight)
    trace: list[dict] = []
    step = schedule.step_size
    it_global = 0
    for stage_idx, n_iters in enumerate(schedule.stage_lengths):
        if n_iters == 0:
            continue
        use_lam, use_mu, live = _STAGES[stage_idx]
        lam = cfg.lambda_match if use_lam else 0.0
        mu = cfg.mu_cycle if use_mu else 0.0
        state, step, it_global = _descend_stage(
            state, objective, lam, mu, not live, n_iters, step,
            schedule.step_decay, trace, stage_idx + 1, it_global)

    map_st, map_ts, m_src, m_tgt = _fields_from_state(
        state, up_t, up_s, tgt.width, tgt.height, src.width, src.height)
    ones_t = np.ones((tgt.height, tgt.width), bool)
    ones_s = np.ones((src.height, src.width), bool)
    return FineFlowResult(FlowField(map_st, ones_t), FlowField(map_ts, ones_s),
                          MatchabilityMap(m_src), MatchabilityMap(m_tgt), trace)


# ---------------------------------------------------------------------------
# gradient validation harness
# ---------------------------------------------------------------------------

def params_to_fields(src: Image, tgt: Image, params_tgt: FlowParams,
                     params_src: FlowParams):
    """Expand coarse parameter grids into full-resolution fields."""
    up_t = _Upsampler(tgt.width, tgt.height)
    up_s = _Upsampler(src.width, src.height)
    state = _JointState(params_tgt.grid, params_tgt.match_grid,
                        params_src.grid, params_src.match_grid)
    map_st, map_ts, m_src, m_tgt = _fields_from_state(
        state, up_t, up_s, tgt.width, tgt.height, src.width, src.height)
    ones_t = np.ones((tgt.height, tgt.width), bool)
    ones_s = np.ones((src.height, src.width), bool)
    return (FlowField(map_st, ones_t), FlowField(map_ts, ones_s),
            MatchabilityMap(m_src), MatchabilityMap(m_tgt))


def analytic_param_gradient(src: Image, tgt: Image, params_tgt: FlowParams,
                            params_src: FlowParams, cfg: ObjectiveConfig):
    """Gradient of total_loss (src->tgt direction) w.r.t. all coarse entries."""
    up_t = _Upsampler(tgt.width, tgt.height)
    up_s = _Upsampler(src.width, src.height)
    state = _JointState(params_tgt.grid, params_tgt.match_grid,
                        params_src.grid, params_src.match_grid)
    map_st, map_ts, m_src, m_tgt = _fields_from_state(
        state, up_t, up_s, tgt.width, tgt.height, src.width, src.height)
    res = _loss_core(src.data, tgt.data, map_st, None, map_ts, None,
                     m_src, m_tgt, cfg, cfg.lambda_match, cfg.mu_cycle,
                     need_grad=True)
    g_d_tgt = up_t.down_adjoint(res.g_map_st)
    g_d_src = up_s.down_adjoint(res.g_map_ts)
    g_l_tgt = up_t.down_adjoint(res.g_m_tgt * m_tgt * (1.0 - m_tgt))
    g_l_src = up_s.down_adjoint(res.g_m_src * m_src * (1.0 - m_src))
    return res.total, (g_d_tgt, g_l_tgt, g_d_src, g_l_src)


def loss_gradient_check(src: Image, tgt: Image, params_tgt: FlowParams,
                        params_src: FlowParams, cfg: ObjectiveConfig,
                        h: float = 1e-3) -> float:
    """Max deviation between analytic and central-difference gradients,
    normalized by the largest finite-difference entry."""

    def loss_at(pt: FlowParams, ps: FlowParams) -> float:
        f_st, f_ts, m_s, m_t = params_to_fields(src, tgt, pt, ps)
        val, _ = total_loss(src, tgt, f_st, f_ts, m_s, m_t, cfg)
        return val

    _, analytic = analytic_param_gradient(src, tgt, params_tgt, params_src, cfg)

    arrays = [params_tgt.grid, params_tgt.match_grid,
              params_src.grid, params_src.match_grid]
    fd = [np.zeros_like(a) for a in arrays]
    for ai, arr in enumerate(arrays):
        for j in range(arr.size):
            variants = []
            for sign in (1.0, -1.0):
                g = [a.copy() for a in arrays]
                g[ai].reshape(-1)[j] += sign * h
                variants.append((FlowParams(g[0], g[1], params_tgt.smoothness_weight),
                                 FlowParams(g[2], g[3], params_src.smoothness_weight)))
            lp = loss_at(*variants[0])
            lm = loss_at(*variants[1])
            fd[ai].reshape(-1)[j] = (lp - lm) / (2.0 * h)

    max_fd = max(float(np.max(np.abs(f))) for f in fd)
    scale = max(max_fd, 1e-12)
    dev = max(float(np.max(np.abs(a - f))) for a, f in zip(analytic, fd))
    return dev / scale
