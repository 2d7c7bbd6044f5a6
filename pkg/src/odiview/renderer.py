"""Implicit viewport renderer and the learnable downsampler.

The renderer turns a low-resolution ERP image directly into a perspective
viewport, one query point at a time; no high-resolution ERP image is ever
formed.  A pixel's value is a bilinear skip off the LR image plus a decoded
residual blended from the four surrounding LR cells:

    out(x) = bilinear(lr, x) + sum_j w_j * D(h(z_j, d_j, s(x)))

where z_j are encoder features at the four neighboring cell centers, d_j is
the query offset from neighbor j in LR-cell units, s(x) is the 10-vector
shape descriptor, and w_j are the bilinear areas (sum to one; the containing
cell gets weight 1 when the query sits exactly on its center).  The feature
map h modulates F learned frequencies:

    h = amp(z_j) * [cos(pi * (freq(z_j) . d_j + phase(s(x)))); sin(...)]

The decoder's last layer is zero-initialized, so an untrained model is
exactly the bilinear baseline; everything it learns is a residual on top.

Offsets are measured in LR-cell units rather than any patch- or image-
normalized frame: training sees p/s-cell patches and inference sees W/s-cell
panoramas, and cell units are the only frame shared by both.

The downsampler is an antialiased bicubic reduction plus a zero-initialized
conv residual on the space-to-depth packing, so it starts as exact bicubic
and learns deviations that help the renderer.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import ViewportSpec, inverse_map, viewport_pixel_centers
from .nn import MLP, Conv, Linear, ParamStore
from .resample import ErpImage, downscale_matrix, sample_at
from .geometry import ErpCoord
from .ssr import shape_2d_baseline, shape_at


def local_ensemble(rows: np.ndarray, cols: np.ndarray):
    """Four surrounding cell centers with bilinear area weights.

    Yields (iy, ix, w) per neighbor; weights are the areas of the diagonally
    opposite sub-rectangles, so they sum to one and the containing cell gets
    weight 1 when the query sits exactly on its center.
    """
    y0 = np.floor(rows).astype(np.int64)
    x0 = np.floor(cols).astype(np.int64)
    out = []
    for dy in (0, 1):
        for dx in (0, 1):
            iy, ix = y0 + dy, x0 + dx
            w = (1.0 - np.abs(rows - iy)) * (1.0 - np.abs(cols - ix))
            out.append((iy, ix, w))
    return out


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 2
    channels: int = 16      # encoder feature width
    freqs: int = 16         # modulated frequency count
    hidden: int = 48        # decoder MLP width
    enc_layers: int = 3
    descriptor: str = "spherical"  # "spherical" | "planar" (ablation)

    def __post_init__(self):
        if self.descriptor not in ("spherical", "planar"):
            raise ValueError(f"unknown descriptor kind: {self.descriptor}")


@lru_cache(maxsize=32)
def _dmat(n: int, s: int, wrap: bool) -> np.ndarray:
    m = downscale_matrix(n, s, wrap)
    m.flags.writeable = False
    return m


def _space_to_depth(t: Tensor, s: int) -> Tensor:
    c, h, w = t.shape
    t = ad.reshape(t, (c, h // s, s, w // s, s))
    t = ad.transpose(t, (0, 2, 4, 1, 3))
    return ad.reshape(t, (c * s * s, h // s, w // s))


class Downsampler:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.s = cfg.scale
        c = cfg.channels
        self.conv1 = Conv(store, "down.1", 3 * self.s**2, c)
        self.conv2 = Conv(store, "down.2", c, c)
        self.conv3 = Conv(store, "down.3", c, 3, zero=True)

    def base(self, hr: Tensor, wrap_x: bool) -> Tensor:
        """Differentiable antialiased bicubic reduction (matrix form)."""
        c, h, w = hr.shape
        ky = _dmat(h, self.s, False)
        kx = _dmat(w, self.s, wrap_x)
        t = ad.reshape(ad.transpose(hr, (0, 2, 1)), (c * w, h))
        t = ad.matmul(t, Tensor(ky.T))
        t = ad.transpose(ad.reshape(t, (c, w, h // self.s)), (0, 2, 1))
        t = ad.reshape(t, (c * (h // self.s), w))
        t = ad.matmul(t, Tensor(kx.T))
        return ad.reshape(t, (c, h // self.s, w // self.s))

    def __call__(self, hr: Tensor, wrap_x: bool = True) -> Tensor:
        packed = _space_to_depth(hr, self.s)
        x = ad.reshape(packed, (1,) + packed.shape)
        x = ad.gelu(self.conv1(x, wrap_x))
        x = ad.gelu(self.conv2(x, wrap_x))
        x = self.conv3(x, wrap_x)
        res = ad.reshape(x, x.shape[1:])
        return self.base(hr, wrap_x) + res


class ViewportRenderer:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.cfg = cfg
        c, f = cfg.channels, cfg.freqs
        self.enc_in = Conv(store, "enc.in", 3, c)
        self.enc_mid = [Conv(store, f"enc.{i}", c, c) for i in range(cfg.enc_layers)]
        self.h_a = Linear(store, "ha", c, 2 * f)
        self.h_f = Linear(store, "hf", c, 2 * f)
        self.h_p = Linear(store, "hp", 10, f)
        self.decoder = MLP(store, "dec", [2 * f, cfg.hidden, cfg.hidden, 3],
                           zero_last=True)

    # -- encoder ------------------------------------------------------------
    def encode(self, lr: Tensor, wrap_x: bool = True) -> Tensor:
        """(3, h, w) -> (C, h, w) feature grid aligned with LR cells."""
        x = ad.reshape(lr, (1,) + lr.shape)
        h0 = self.enc_in(x, wrap_x)
        h = h0
        for conv in self.enc_mid:
            h = ad.gelu(conv(h, wrap_x))
        h = h + h0
        return ad.reshape(h, h.shape[1:])

    # -- core query ---------------------------------------------------------
    def query(self, z: Tensor, lr: Tensor, rows: np.ndarray, cols: np.ndarray,
              desc: np.ndarray, wrap_x: bool = True) -> Tensor:
        """Render n query points given LR raster coordinates; returns (3, n).

        rows/cols are continuous positions on the LR grid (cell centers at
        integers); desc is the (n, 10) shape-descriptor batch.
        """
        f = self.cfg.freqs
        skip = ad.bilinear_gather(lr, rows, cols, wrap_x)
        phase_s = self.h_p(Tensor(desc))            # (n, F), shared by neighbors
        acc = None
        for iy, ix, w in local_ensemble(rows, cols):
            d_row = (rows - iy)[:, None]            # offsets in cell units
            d_col = (cols - ix)[:, None]
            zj = ad.transpose(ad.gather2d(z, iy, ix, wrap_x), (1, 0))
            amp = self.h_a(zj)
            fr = self.h_f(zj)
            phase = (fr[:, :f] * d_col + fr[:, f:] * d_row + phase_s) * np.pi
            feat = amp * ad.concat([ad.cos(phase), ad.sin(phase)], axis=1)
            contrib = self.decoder(feat) * w[:, None]
            acc = contrib if acc is None else acc + contrib
        return skip + ad.transpose(acc, (1, 0))

    # -- entry points ---------------------------------------------------------
    def _descriptors(self, spec: ViewportSpec, y, h: int, w: int) -> np.ndarray:
        if self.cfg.descriptor == "planar":
            return shape_2d_baseline(spec, y, h, w).flat
        return shape_at(spec, y, h, w).flat

    def render_viewport(self, lr: ErpImage, spec: ViewportSpec,
                        clamp: bool = True) -> np.ndarray:
        """LR panorama -> (3, h_v, w_v) viewport, no HR panorama in between."""
        hl, wl = lr.h, lr.w
        lr_t = Tensor(lr.pixels)
        z = self.encode(lr_t, wrap_x=True)
        y = viewport_pixel_centers(spec)
        c = inverse_map(spec, y, hl, wl)   # query positions on the LR raster
        desc = self._descriptors(spec, y, hl, wl)
        out = self.query(z, lr_t, c.x2, c.x1, desc, wrap_x=True)
        img = out.data.reshape(3, spec.h_v, spec.w_v)
        return np.clip(img, 0.0, 1.0) if clamp else img

    def predict_samples(self, lr_patch: Tensor, z: Tensor, coords: np.ndarray,
                        desc: np.ndarray) -> Tensor:
        """Training-path prediction at patch-normalized coords; returns (3, n)."""
        s = self.cfg.scale
        p = lr_patch.shape[1] * s
        local = (coords + 1.0) * p / 2.0
        rows = (local[:, 1] - (s - 1) / 2.0) / s
        cols = (local[:, 0] - (s - 1) / 2.0) / s
        return self.query(z, lr_patch, rows, cols, desc, wrap_x=False)


def render_viewport_baseline(lr: ErpImage, spec: ViewportSpec,
                             method: str = "bilinear") -> np.ndarray:
    """Interpolate the LR panorama directly at the viewport's query points."""
    y = viewport_pixel_centers(spec)
    c = inverse_map(spec, y, lr.h, lr.w)
    if method == "bilinear":
        out = ad.bilinear_gather(Tensor(lr.pixels), c.x2, c.x1, wrap_x=True).data
    elif method == "bicubic":
        out = sample_at(lr, ErpCoord(x1=c.x1, x2=c.x2))
    else:
        raise ValueError(f"unknown method: {method}")
    return np.clip(out.reshape(3, spec.h_v, spec.w_v), 0.0, 1.0)
