"""Synthetic equirectangular panoramas for tests, training demos, and probes.

The generator evaluates a random field of 3D sinusoids at each pixel's unit
sphere direction, so the image is continuous across the longitude seam and at
the poles by construction -- there is no way to bake a seam artifact in.
Octave frequencies grow geometrically while amplitudes shrink, giving a
natural-looking 1/f-ish spectrum whose high-frequency energy (and therefore
coded bit cost) is controlled by `detail` and `beta`.
"""

from __future__ import annotations

import numpy as np

from .geometry import ErpCoord, erp_to_sphere, sphere_to_unit
from .resample import ErpImage


def sphere_directions(h: int, w: int) -> np.ndarray:
    """(h, w, 3) unit direction for every ERP pixel center."""
    x1, x2 = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    return sphere_to_unit(erp_to_sphere(ErpCoord(x1=x1, x2=x2), h, w))


def make_panorama(seed: int, h: int, w: int, octaves: int = 9,
                  beta: float = 0.45, waves: int = 5,
                  detail: float = 1.2) -> ErpImage:
    """Seam-free textured test panorama, channels' values in [0.02, 0.98].

    beta flattens the octave-amplitude falloff (smaller = busier texture);
    detail scales all non-base octaves together.
    """
    if h % 2 or w != 2 * h:
        raise ValueError(f"expected 2:1 equirectangular dims, got {h}x{w}")
    rng = np.random.default_rng(seed)
    d = sphere_directions(h, w)
    lat = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))
    px = np.zeros((3, h, w))
    for c in range(3):
        v = 0.5 * rng.normal() * np.cos(2.0 * lat)  # broad pole/equator ramp
        for o in range(octaves):
            freq = 3.0 * 2.0**o
            amp = 1.0 if o == 0 else detail / (2.0**o) ** beta
            for _ in range(waves):
                k = rng.normal(size=3)
                k *= freq / np.linalg.norm(k)
                v = v + amp * rng.normal() * np.sin(d @ k + rng.uniform(0.0, 7.0))
        px[c] = v
    px -= px.min()
    px /= px.max()
    return ErpImage(pixels=0.02 + 0.96 * px)


def make_band_panorama(seed: int, h: int, w: int,
                       octave_band: tuple[int, ...] = (3, 4, 5),
                       amp: float = 0.6, waves: int = 8) -> ErpImage:
    """Panorama whose texture energy sits in a narrow wavelength band.

    The default band puts wavelengths a few LR pixels above the 2x-downscale
    Nyquist limit (about 21, 11, and 5 pixels at w=512), i.e. detail that
    plain bilinear upsampling blurs away but the LR raster still represents.
    That is the regime where a learned renderer has something real to
    recover, so this is the fixture for the training demo; `make_panorama`'s
    broad spectrum leaves most of its residual above Nyquist and unlearnable
    at any model size.
    """
    if h % 2 or w != 2 * h:
        raise ValueError(f"expected 2:1 equirectangular dims, got {h}x{w}")
    rng = np.random.default_rng(seed)
    d = sphere_directions(h, w)
    lat = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))
    px = np.zeros((3, h, w))
    for c in range(3):
        v = 0.5 * rng.normal() * np.cos(2.0 * lat)
        k = rng.normal(size=3)
        k /= np.linalg.norm(k)
        v = v + 0.3 * np.sin(3.0 * (d @ k) + rng.uniform(0.0, 7.0))
        for o in octave_band:
            freq = 3.0 * 2.0**o
            for _ in range(waves):
                k = rng.normal(size=3)
                k /= np.linalg.norm(k)
                v = v + amp * np.sin(freq * (d @ k) + rng.uniform(0.0, 7.0))
        px[c] = v
    px -= px.min()
    px /= px.max()
    return ErpImage(pixels=0.02 + 0.96 * px)
