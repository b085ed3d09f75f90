"""PNG and PPM image I/O (8-bit), normalized to float [0, 1] on load."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import FormatError, Image, MatchabilityMap


def read_image(path) -> Image:
    """Load a PNG or PPM/PGM file as a float image in [0, 1].

    Grayscale stays single channel; palette/alpha images are flattened to
    RGB.  16-bit inputs are scaled by 65535.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with PILImage.open(path) as im:
            if im.mode in ("1", "L", "I;16", "I"):
                arr = np.asarray(im.convert("I"), dtype=np.float64)
                maxv = 65535.0 if im.mode in ("I;16", "I") else 255.0
                data = (arr / maxv)[:, :, None]
            else:
                data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc
    return Image(np.clip(data, 0.0, 1.0))


def _atomic_write(path: Path, write_fn) -> None:
    # temp + rename so concurrent readers never observe partial files
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_image(img: Image, path) -> None:
    """Write as 8-bit PNG or PPM/PGM depending on the file extension."""
    path = Path(path)
    arr = np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)
    if img.channels == 1:
        pil = PILImage.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(arr, mode="RGB")
    ext = path.suffix.lower()
    if ext in (".ppm", ".pgm", ".pnm"):
        _atomic_write(path, lambda tmp: pil.save(tmp, format="PPM"))
    elif ext == ".png":
        _atomic_write(path, lambda tmp: pil.save(tmp, format="PNG"))
    else:
        raise ValueError(f"unsupported image extension: {path.suffix!r}")


def write_mask_png(mask: MatchabilityMap, path) -> None:
    """Store a matchability map as 8-bit grayscale PNG (value * 255)."""
    arr = np.clip(np.round(mask.values * 255.0), 0, 255).astype(np.uint8)
    _atomic_write(Path(path), lambda tmp: PILImage.fromarray(arr, mode="L").save(tmp, format="PNG"))


def read_mask_png(path) -> MatchabilityMap:
    img = read_image(path)
    gray = img.data[:, :, 0] if img.channels == 1 else img.data.mean(axis=2)
    return MatchabilityMap(gray)


def read_selection_mask(path) -> np.ndarray:
    """Binary mask from an 8-bit PNG: True where the stored value > 127."""
    img = read_image(path)
    gray = img.data[:, :, 0] if img.channels == 1 else img.data.mean(axis=2)
    return gray > (127.0 / 255.0)
