"""Bicubic interpolation on ERP rasters: point sampling and antialiased downscale.

The cubic is the Keys kernel with a = -0.5 (the classical "bicubic" used by
imaging libraries).  Horizontal indexing wraps (the panorama is periodic in
longitude); vertical indexing clamps to the edge rows.  The downscale is the
standard antialiased form: kernel stretched by the scale factor, weights
renormalized to sum to one, applied separably as two precomputed banded
matrices -- the same matrices the differentiable path in :mod:`odiview.nn`
multiplies by, so the two implementations cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ErpCoord


@dataclass
class ErpImage:
    """An equirectangular panorama: channel-first float64 pixels in [0, 1]."""

    pixels: np.ndarray  # (3, H, W)

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) pixels, got {p.shape}")
        self.pixels = p

    @property
    def h(self) -> int:
        return self.pixels.shape[1]

    @property
    def w(self) -> int:
        return self.pixels.shape[2]


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic, support [-2, 2]."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2 = t * t
    t3 = t2 * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t < 1.0, near, np.where(t < 2.0, far, 0.0))


def _gather_rows(img: np.ndarray, iy: np.ndarray) -> np.ndarray:
    # latitude clamps: rows beyond the poles repeat the edge row
    return np.clip(iy, 0, img.shape[1] - 1)


def sample_at(img: ErpImage, c: ErpCoord, wrap_x: bool = True) -> np.ndarray:
    """Bicubic point samples at continuous ERP coordinates; returns (3, ...)."""
    px = img.pixels
    h, w = img.h, img.w
    x1 = np.asarray(c.x1, dtype=np.float64)
    x2 = np.asarray(c.x2, dtype=np.float64)
    shape = x1.shape

    fx = np.floor(x1)
    fy = np.floor(x2)
    # 4 taps per axis at offsets -1..2 around the floor cell
    offs = np.arange(-1, 3)
    ix = fx[..., None].astype(np.int64) + offs          # (..., 4)
    iy = fy[..., None].astype(np.int64) + offs
    wx = cubic_kernel(x1[..., None] - ix)               # (..., 4)
    wy = cubic_kernel(x2[..., None] - iy)
    if wrap_x:
        ix = np.mod(ix, w)
    else:
        ix = np.clip(ix, 0, w - 1)
    iy = np.clip(iy, 0, h - 1)

    # gather the 4x4 neighborhoods: (3, ..., 4, 4)
    patch = px[:, iy[..., :, None], ix[..., None, :]]
    wgt = wy[..., :, None] * wx[..., None, :]
    out = np.sum(patch * wgt, axis=(-1, -2))
    return out.reshape((3,) + shape)


def downscale_matrix(n_hi: int, s: int, wrap: bool) -> np.ndarray:
    """Dense (n_hi//s, n_hi) antialiased bicubic row-reduction matrix.

    Output center j maps to input coordinate s*j + (s-1)/2; taps cover
    |t| < 2s and are renormalized so each row sums to one.
    """
    if n_hi % s:
        raise ValueError(f"length {n_hi} not divisible by scale {s}")
    n_lo = n_hi // s
    m = np.zeros((n_lo, n_hi))
    half = 2 * s  # kernel support after stretching
    for j in range(n_lo):
        center = s * j + (s - 1) / 2.0
        lo = int(np.floor(center)) - half + 1
        taps = np.arange(lo, lo + 2 * half)
        wgt = cubic_kernel((taps - center) / s)
        if wrap:
            taps = np.mod(taps, n_hi)
        else:
            taps = np.clip(taps, 0, n_hi - 1)
        wgt = wgt / wgt.sum()
        np.add.at(m[j], taps, wgt)
    return m


def bicubic_downscale(img: ErpImage, s: int) -> ErpImage:
    """Antialiased bicubic downscale by integer factor s (wrap in x, clamp in y)."""
    if s == 1:
        return ErpImage(pixels=img.pixels.copy())
    ky = downscale_matrix(img.h, s, wrap=False)
    kx = downscale_matrix(img.w, s, wrap=True)
    return ErpImage(pixels=ky @ img.pixels @ kx.T)


def downscale_array(px: np.ndarray, s: int, wrap_x: bool = True) -> np.ndarray:
    """Same reduction for a bare (C, H, W) array (used on non-panorama patches)."""
    if s == 1:
        return px.copy()
    ky = downscale_matrix(px.shape[1], s, wrap=False)
    kx = downscale_matrix(px.shape[2], s, wrap=wrap_x)
    return ky @ px @ kx.T


def crop_patch(img: ErpImage, a: int, b: int, p: int) -> np.ndarray:
    """Axis-aligned p x p crop with top-left (a, b) = (col, row), wrapping in x.

    Vertical overflow is a caller bug (crops are drawn inside the raster), so
    it raises rather than clamps.
    """
    if not (0 <= b and b + p <= img.h):
        raise ValueError(f"rows [{b}, {b + p}) outside raster of height {img.h}")
    cols = np.mod(np.arange(a, a + p), img.w)
    return img.pixels[:, b:b + p, :][:, :, cols]
