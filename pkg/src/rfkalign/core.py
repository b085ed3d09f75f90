"""Shared domain types, pixel access and bilinear resampling.

Conventions used across the package:

* Pixel values are floats in [0, 1]; arrays are row-major with shape
  (height, width) or (height, width, channels).
* A pixel's coordinate is its index: the sample point of pixel (x, y) is
  exactly (float(x), float(y)).  Bilinear interpolation is defined on the
  closed box [0, W-1] x [0, H-1].
* A FlowField named "a_to_b" lives on b's pixel grid and stores, for every
  b-pixel, the a-frame location to sample (backward warping).  Warping a
  into b's frame is then a plain gather with no holes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class FormatError(ValueError):
    """A file does not conform to one of the on-disk formats."""


class DegeneracyError(ValueError):
    """A geometric estimation problem is rank deficient / unsolvable."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Image:
    """Dense pixel grid with 1 or 3 channels, values in [0, 1]."""

    data: np.ndarray  # (h, w, c) float64

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError(f"image must be (h, w, 1|3), got {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError("degenerate image (zero-sized axis)")
        if not np.all(np.isfinite(d)):
            raise ValueError("image contains non-finite values")
        if d.min() < -1e-9 or d.max() > 1 + 1e-9:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(np.clip(d, 0.0, 1.0)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def to_gray(img: Image) -> np.ndarray:
    """Luma plane of an image as an (h, w) array."""
    if img.channels == 1:
        return img.data[:, :, 0]
    w = np.asarray(LUMA_WEIGHTS)
    return img.data @ w


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Strided grid of per-cell descriptors extracted at one scale.

    Cell (i, j) covers the pixel block starting at (j*stride, i*stride) of
    the *scaled* image; its sample point in native (unscaled) coordinates is
    recovered through ``cell_centers``.  Zero-norm descriptors are invalid
    and excluded from matching.
    """

    data: np.ndarray  # (grid_h, grid_w, channels) float32
    stride: int
    scale_factor: float

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float32)
        if d.ndim != 3:
            raise ValueError("feature map must be (grid_h, grid_w, channels)")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not self.scale_factor > 0:
            raise ValueError("scale_factor must be > 0")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def grid_h(self) -> int:
        return self.data.shape[0]

    @property
    def grid_w(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def valid(self) -> np.ndarray:
        """(grid_h, grid_w) bool, True where the descriptor has nonzero norm."""
        return np.linalg.norm(self.data.astype(np.float64), axis=2) > 1e-12

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Native-coordinate (xs, ys) of all cell centers, each (grid_h, grid_w).

        The center of cell (i, j) sits at ((j + 0.5)*stride - 0.5) in scaled
        pixel coordinates; the half-pixel convention maps it back to the
        unscaled frame through the nominal scale factor.
        """
        j = np.arange(self.grid_w, dtype=np.float64)
        i = np.arange(self.grid_h, dtype=np.float64)
        cx = (j + 0.5) * self.stride - 0.5
        cy = (i + 0.5) * self.stride - 0.5
        nx = (cx + 0.5) / self.scale_factor - 0.5
        ny = (cy + 0.5) / self.scale_factor - 0.5
        return np.tile(nx, (self.grid_h, 1)), np.tile(ny[:, None], (1, self.grid_w))


@dataclass(frozen=True)
class Correspondence:
    """A sparse match between a source and a target pixel location."""

    src: tuple[float, float]
    tgt: tuple[float, float]
    score: float


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective transform in canonical form.

    Canonical form: Frobenius norm 1 and h[2,2] >= 0 (sign fixed by the
    first nonzero entry when h[2,2] is zero), so equal transforms compare
    equal elementwise.
    """

    mat: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mat, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        n = np.linalg.norm(m)
        if not np.isfinite(n) or n < 1e-30:
            raise DegeneracyError("homography has (near-)zero norm")
        m = m / n
        if m[2, 2] < 0 or (m[2, 2] == 0 and m.ravel()[np.flatnonzero(m.ravel())[0]] < 0):
            m = -m
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegeneracyError("homography is not invertible")
        object.__setattr__(self, "mat", _freeze(m))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.mat))

    def apply(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map point arrays through the transform.

        Returns (xs', ys', ok) where ok is False where the homogeneous
        scale collapses to ~0.
        """
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        h = self.mat
        w = h[2, 0] * xs + h[2, 1] * ys + h[2, 2]
        ok = np.abs(w) > 1e-12
        wsafe = np.where(ok, w, 1.0)
        xo = (h[0, 0] * xs + h[0, 1] * ys + h[0, 2]) / wsafe
        yo = (h[1, 0] * xs + h[1, 1] * ys + h[1, 2]) / wsafe
        return xo, yo, ok


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel correspondence field on the destination grid.

    ``map_xy[y, x]`` holds the absolute (x, y) sample location in the other
    frame; ``valid`` flags pixels that carry a correspondence at all.  Valid
    sample locations may still fall outside the sampled image; warping
    operations mark those samples invalid.
    """

    map_xy: np.ndarray  # (h, w, 2) float64, [..., 0]=x, [..., 1]=y
    valid: np.ndarray   # (h, w) bool

    def __post_init__(self):
        m = np.asarray(self.map_xy, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if m.ndim != 3 or m.shape[2] != 2 or v.shape != m.shape[:2]:
            raise ValueError("flow field must be map (h, w, 2) + valid (h, w)")
        if not np.all(np.isfinite(m[v])):
            raise ValueError("valid flow pixels must have finite coordinates")
        object.__setattr__(self, "map_xy", _freeze(m))
        object.__setattr__(self, "valid", _freeze(v))

    @property
    def height(self) -> int:
        return self.map_xy.shape[0]

    @property
    def width(self) -> int:
        return self.map_xy.shape[1]

    def displacement(self) -> np.ndarray:
        """(h, w, 2) displacement (sample location minus own pixel location)."""
        h, w = self.map_xy.shape[:2]
        xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        return self.map_xy - np.stack([xs, ys], axis=2)


def identity_flow(width: int, height: int) -> FlowField:
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    return FlowField(np.stack([xs, ys], axis=2), np.ones((height, width), bool))


def flow_from_displacement(disp: np.ndarray, valid: Optional[np.ndarray] = None) -> FlowField:
    disp = np.asarray(disp, dtype=np.float64)
    h, w = disp.shape[:2]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    if valid is None:
        valid = np.ones((h, w), bool)
    return FlowField(disp + np.stack([xs, ys], axis=2), valid)


@dataclass(frozen=True, eq=False)
class MatchabilityMap:
    """Per-pixel correspondence confidence in [0, 1]."""

    values: np.ndarray  # (h, w) float64

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("matchability map must be 2-D")
        if not np.all(np.isfinite(v)) or v.min() < -1e-9 or v.max() > 1 + 1e-9:
            raise ValueError("matchability values must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(np.clip(v, 0.0, 1.0)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class AlignmentIteration:
    homography: Homography
    flow: FlowField            # target grid -> original source coordinates
    matchability: MatchabilityMap  # target grid


@dataclass(frozen=True)
class AlignmentResult:
    """Ordered multi-homography iterations plus the aggregated final flow."""

    iterations: tuple[AlignmentIteration, ...]
    final_flow: FlowField
    final_matchability: MatchabilityMap


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_neighbors(width: int, height: int, xs: np.ndarray, ys: np.ndarray):
    """Footprint of bilinear samples at (xs, ys).

    Returns (x0, y0, fx, fy, inb): integer corner indices (clamped so that
    x0+1 / y0+1 are always addressable), fractional weights and the
    in-bounds mask for the closed box [0, W-1] x [0, H-1].  Size-1 axes are
    handled by a zero-width footprint.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inb = (xs >= 0) & (xs <= width - 1) & (ys >= 0) & (ys <= height - 1)
    inb &= np.isfinite(xs) & np.isfinite(ys)
    xc = np.clip(np.nan_to_num(xs, nan=0.0, posinf=0.0, neginf=0.0), 0, width - 1)
    yc = np.clip(np.nan_to_num(ys, nan=0.0, posinf=0.0, neginf=0.0), 0, height - 1)
    x0 = np.minimum(np.floor(xc), width - 2 if width > 1 else 0).astype(np.int64)
    y0 = np.minimum(np.floor(yc), height - 2 if height > 1 else 0).astype(np.int64)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    fx = xc - x0 if width > 1 else np.zeros_like(xc)
    fy = yc - y0 if height > 1 else np.zeros_like(yc)
    return x0, y0, fx, fy, inb


def bilinear_gather(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bilinearly sample ``arr`` ((h, w) or (h, w, c)) at float positions.

    Returns (values, inb).  Values at out-of-bounds positions are computed
    from clamped footprints and must be masked by the caller.
    """
    h, w = arr.shape[:2]
    x0, y0, fx, fy, inb = bilinear_neighbors(w, h, xs, ys)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if arr.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = arr[y0, x0]
    v01 = arr[y0, x1]
    v10 = arr[y1, x0]
    v11 = arr[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy, inb


def bilinear_sample(img: Image, x: float, y: float) -> Optional[np.ndarray]:
    """Sample one position; returns the channel vector or None when the
    sample footprint leaves the image (out-of-bounds is a value, not an
    error)."""
    vals, inb = bilinear_gather(img.data, np.asarray([x]), np.asarray([y]))
    if not inb[0]:
        return None
    return vals[0]


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

def _axis_coords(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel convention; exact identity when n_out == n_in
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(x, 0.0, n_in - 1)


def resize_to(img: Image, out_w: int, out_h: int) -> Image:
    """Bilinear resize to an explicit size."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    if out_w == img.width and out_h == img.height:
        return img
    xs = _axis_coords(out_w, img.width)
    ys = _axis_coords(out_h, img.height)
    gx, gy = np.meshgrid(xs, ys)
    vals, _ = bilinear_gather(img.data, gx, gy)
    return Image(vals)


def resize_min_side(img: Image, min_side: int) -> Image:
    """Resize preserving aspect ratio so min(width, height) == min_side."""
    if min_side < 1:
        raise ValueError("min_side must be >= 1")
    w, h = img.width, img.height
    if min(w, h) == min_side:
        return img
    if w <= h:
        out_w = min_side
        out_h = max(1, int(round(h * min_side / w)))
    else:
        out_h = min_side
        out_w = max(1, int(round(w * min_side / h)))
    return resize_to(img, out_w, out_h)
