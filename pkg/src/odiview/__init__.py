"""Panorama downscaling, compression, and direct viewport rendering.

The pipeline has two halves: an equirectangular (ERP) panorama is downscaled
and JPEG-compressed for transmission, and perspective viewports are rendered
straight from the low-resolution ERP by an implicit renderer guided by
spherical pixel-shape descriptors.  No intermediate high-resolution ERP image
is ever materialized.
"""

__version__ = "0.1.0"

from .geometry import ViewportSpec, erp_to_sphere, sphere_to_erp, forward_map, inverse_map
from .resample import ErpImage, sample_at, bicubic_downscale, crop_patch

__all__ = [
    "ViewportSpec",
    "ErpImage",
    "erp_to_sphere",
    "sphere_to_erp",
    "forward_map",
    "inverse_map",
    "sample_at",
    "bicubic_downscale",
    "crop_patch",
]
