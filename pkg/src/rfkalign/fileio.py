"""Binary and plain-text interchange formats.

Flow fields use the Middlebury ``.flo`` convention: 4-byte magic b"PIEH",
little-endian int32 width and height, then row-major float32 (dx, dy)
displacement pairs where dx = x_sample - x.  Invalid pixels are stored with
components > 1e9.

Feature maps use the RFKFEAT1 layout: 8-byte ASCII magic "RFKFEAT1",
little-endian int32 grid_w, grid_h, channels, stride, a float32
scale_factor, then row-major float32 descriptors.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import Correspondence, FeatureMap, FlowField, FormatError
from .imgio import _atomic_write

FLO_MAGIC = b"PIEH"
FLO_INVALID = 1e10
FEAT_MAGIC = b"RFKFEAT1"


def write_flo(flow: FlowField, path) -> None:
    h, w = flow.height, flow.width
    disp = flow.displacement().astype(np.float32)
    disp = np.where(flow.valid[:, :, None], disp, np.float32(FLO_INVALID))

    def _w(tmp):
        with open(tmp, "wb") as f:
            f.write(FLO_MAGIC)
            f.write(struct.pack("<ii", w, h))
            f.write(np.ascontiguousarray(disp, dtype="<f4").tobytes())

    _atomic_write(Path(path), _w)


def read_flo(path) -> FlowField:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: not a .flo file (bad magic)")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: nonsensical dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise FormatError(f"{path}: truncated ({len(raw)} bytes, need {need})")
    disp = np.frombuffer(raw[12:need], dtype="<f4").reshape(h, w, 2).astype(np.float64)
    valid = np.all(np.abs(disp) <= 1e9, axis=2) & np.all(np.isfinite(disp), axis=2)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    map_xy = np.where(valid[:, :, None], disp + np.stack([xs, ys], axis=2), 0.0)
    return FlowField(map_xy, valid)


def write_featmap(fm: FeatureMap, path) -> None:
    def _w(tmp):
        with open(tmp, "wb") as f:
            f.write(FEAT_MAGIC)
            f.write(struct.pack("<iiii", fm.grid_w, fm.grid_h, fm.channels, fm.stride))
            f.write(struct.pack("<f", fm.scale_factor))
            f.write(np.ascontiguousarray(fm.data, dtype="<f4").tobytes())

    _atomic_write(Path(path), _w)


def read_featmap(path) -> FeatureMap:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 28 or raw[:8] != FEAT_MAGIC:
        raise FormatError(f"{path}: not an RFKFEAT1 file (bad magic)")
    gw, gh, ch, stride = struct.unpack("<iiii", raw[8:24])
    (scale,) = struct.unpack("<f", raw[24:28])
    if min(gw, gh, ch, stride) <= 0 or not scale > 0:
        raise FormatError(f"{path}: invalid header ({gw}x{gh}x{ch}, stride {stride})")
    need = 28 + 4 * gw * gh * ch
    if len(raw) != need:
        raise FormatError(f"{path}: size mismatch ({len(raw)} bytes, header implies {need})")
    data = np.frombuffer(raw[28:], dtype="<f4").reshape(gh, gw, ch)
    return FeatureMap(data, stride=stride, scale_factor=float(scale))


# ---------------------------------------------------------------------------
# plain-text formats
# ---------------------------------------------------------------------------

def write_correspondences(corrs: list[Correspondence], path) -> None:
    """One `x_s y_s x_t y_t score` line per match."""
    lines = [
        f"{c.src[0]:.6f} {c.src[1]:.6f} {c.tgt[0]:.6f} {c.tgt[1]:.6f} {c.score:.6f}"
        for c in corrs
    ]
    _atomic_write(Path(path), lambda tmp: Path(tmp).write_text("\n".join(lines) + ("\n" if lines else "")))


def read_correspondences(path) -> list[Correspondence]:
    out = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"{path}:{ln}: expected 5 fields, got {len(parts)}")
        xs, ys, xt, yt, s = (float(p) for p in parts)
        out.append(Correspondence((xs, ys), (xt, yt), s))
    return out


def write_homography_txt(mat: np.ndarray, path) -> None:
    lines = [" ".join(f"{v:.17g}" for v in row) for row in np.asarray(mat, dtype=np.float64)]
    _atomic_write(Path(path), lambda tmp: Path(tmp).write_text("\n".join(lines) + "\n"))


def read_matrix_txt(path, shape) -> np.ndarray:
    vals = [float(v) for v in Path(path).read_text().split()]
    need = int(np.prod(shape))
    if len(vals) != need:
        raise FormatError(f"{path}: expected {need} values, found {len(vals)}")
    return np.asarray(vals, dtype=np.float64).reshape(shape)


def read_calib_txt(path) -> tuple[np.ndarray, np.ndarray]:
    """Two `fx fy cx cy` lines: intrinsics of the source then target camera."""
    rows = [r.split() for r in Path(path).read_text().splitlines() if r.strip()]
    if len(rows) != 2 or any(len(r) != 4 for r in rows):
        raise FormatError(f"{path}: expected two `fx fy cx cy` lines")
    return (np.asarray([float(v) for v in rows[0]]),
            np.asarray([float(v) for v in rows[1]]))


def read_pose_txt(path) -> tuple[np.ndarray, np.ndarray]:
    """Row-major 3x3 rotation followed by a 3-vector translation (12 numbers).

    Convention: X_src = R @ X_tgt + t maps target-camera coordinates into the
    source camera frame.
    """
    vals = [float(v) for v in Path(path).read_text().split()]
    if len(vals) != 12:
        raise FormatError(f"{path}: expected 12 numbers (R row-major then t)")
    arr = np.asarray(vals, dtype=np.float64)
    return arr[:9].reshape(3, 3), arr[9:]


def write_pose_txt(rotation: np.ndarray, translation: np.ndarray, path) -> None:
    vals = list(np.asarray(rotation, dtype=np.float64).ravel()) + list(
        np.asarray(translation, dtype=np.float64).ravel())
    _atomic_write(Path(path), lambda tmp: Path(tmp).write_text(
        " ".join(f"{v:.17g}" for v in vals) + "\n"))
