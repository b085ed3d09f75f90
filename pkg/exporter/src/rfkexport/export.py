"""Per-image multi-scale export to RFKFEAT1 files.

File layout (shared interchange format): 8-byte ASCII magic "RFKFEAT1",
little-endian int32 grid_w, grid_h, channels, stride, float32 scale
factor, then row-major float32 descriptors.  Output files are named
``{image stem}_s{scale:.2f}.rfkfeat`` so consumers can locate the map for
each configured scale.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .model import CONV4_STRIDE, features_for, get_trunk
from .weights import resolve_weights_path

DEFAULT_SCALES = (0.5, 0.6, 0.88, 1.0, 1.33, 1.66, 2.0)
FEAT_MAGIC = b"RFKFEAT1"
MIN_SCALED_SIDE = 33  # below this the conv tower collapses to nothing

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp")


def write_rfkfeat(path: Path, data: np.ndarray, stride: int, scale: float) -> None:
    gh, gw, ch = data.shape
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<iiii", gw, gh, ch, stride))
        f.write(struct.pack("<f", scale))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    tmp.replace(path)


def _load_rgb(path: Path) -> torch.Tensor:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def export_image(img_path, out_dir, backbone: str = "imagenet",
                 weights_path=None, scales=DEFAULT_SCALES) -> list[Path]:
    """Export one image at every scale; returns the written file paths."""
    img_path = Path(img_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = resolve_weights_path(backbone, weights_path)
    trunk = get_trunk(weights)
    rgb = _load_rgb(img_path)
    _, h, w = rgb.shape

    written = []
    for scale in scales:
        sw = max(1, int(round(w * scale)))
        sh = max(1, int(round(h * scale)))
        if min(sw, sh) < MIN_SCALED_SIDE:
            raise ValueError(
                f"{img_path}: {sw}x{sh} after scale {scale} is too small "
                f"for the conv4 trunk (need min side >= {MIN_SCALED_SIDE})")
        scaled = torch.nn.functional.interpolate(
            rgb.unsqueeze(0), size=(sh, sw), mode="bilinear",
            align_corners=False).squeeze(0)
        feat = features_for(trunk, scaled).numpy()
        out = out_dir / f"{img_path.stem}_s{scale:.2f}.rfkfeat"
        write_rfkfeat(out, feat, CONV4_STRIDE, float(scale))
        written.append(out)
    return written


def export_path(path, out_dir, backbone: str = "imagenet",
                weights_path=None, scales=DEFAULT_SCALES) -> list[Path]:
    """Export a single image or every image in a directory."""
    path = Path(path)
    if path.is_dir():
        written = []
        for img in sorted(path.iterdir()):
            if img.suffix.lower() in IMAGE_SUFFIXES:
                written += export_image(img, out_dir, backbone, weights_path, scales)
        if not written:
            raise FileNotFoundError(f"no images found in {path}")
        return written
    if not path.is_file():
        raise FileNotFoundError(f"no such image or directory: {path}")
    return export_image(path, out_dir, backbone, weights_path, scales)
