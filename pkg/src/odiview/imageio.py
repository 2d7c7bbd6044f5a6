"""Pixel-image file I/O: PNG and PPM in, PNG out.

Compressed panorama transport does not go through here -- those are raw
JFIF byte streams written verbatim (see the codec module).
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .resample import ErpImage

_READ_EXTS = {".png", ".ppm"}


def read_image(path: str | os.PathLike) -> ErpImage:
    """Load an 8-bit RGB image file as a (3, h, w) float image in [0, 1]."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in _READ_EXTS:
        raise ValueError(f"unsupported input format {ext!r} (want .png or .ppm)")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return ErpImage(pixels=arr.transpose(2, 0, 1) / 255.0)


def write_png(path: str | os.PathLike, pixels: np.ndarray):
    """Write a (3, h, w) float array in [0, 1] as an 8-bit RGB PNG."""
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected (3, h, w) pixels, got {pixels.shape}")
    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
