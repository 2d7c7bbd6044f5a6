"""Discrete pixel sampling: supervision triples from an ERP patch / viewport pair.

One training item is built by cropping a p x p patch from the HR panorama,
projecting the full viewport pixel grid back onto the panorama, keeping the
grid points that land inside the patch, subsampling to at most N of them, and
reading off (a) their patch-normalized coordinates, (b) bicubic ground-truth
colors from the HR patch, and (c) the bicubic-downscaled LR patch.  The model
never needs the full HR panorama at train time -- only patches.

Patch-normalized coordinates live in [-1, 1)^2: (a, b) maps to (-1, -1) and
the far corner is exclusive.  Horizontal patch offsets are taken modulo W so
patches may straddle the longitude seam.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ErpCoord, ViewportSpec, erp_to_sphere, viewport_grid, wrap_angle
from .resample import ErpImage, crop_patch, downscale_array, sample_at

FOV_CHOICES_DEG = (80.0, 90.0, 100.0, 110.0, 120.0)
RES_CHOICES = (512, 576, 640, 768, 832, 960, 1024)
N_SAMPLES_DEFAULT = 25600


class EmptyOverlap(RuntimeError):
    """Viewport grid and patch do not intersect; caller should redraw."""


class OutOfPatch(ValueError):
    """Coordinate handed to the normalizer violates the patch bounds."""


@dataclass(frozen=True)
class PatchSpec:
    a: int  # left column (may put a+p past W; columns wrap)
    b: int  # top row
    p: int  # patch side
    s: int  # downscale factor

    def __post_init__(self):
        if self.p <= 0 or self.p % self.s:
            raise ValueError(f"patch size {self.p} not divisible by scale {self.s}")


@dataclass
class SampleSet:
    """coords: (n, 2) normalized patch positions, column 0 horizontal;
    pixels: (3, n) ground-truth colors; view_uv: (n, 2) originating viewport
    pixel coordinates (kept so the renderer side can be evaluated at exactly
    the supervised positions)."""

    coords: np.ndarray
    pixels: np.ndarray
    view_uv: np.ndarray

    @property
    def n(self) -> int:
        return self.coords.shape[0]


def filter_with_bounds(x1: np.ndarray, x2: np.ndarray, ps: PatchSpec, w: int) -> np.ndarray:
    """Boolean mask of points inside the half-open patch box (columns mod W)."""
    in_cols = np.mod(x1 - ps.a, w) < ps.p
    in_rows = (ps.b <= x2) & (x2 < ps.b + ps.p)
    return in_cols & in_rows


def coord_space_transform(x1: np.ndarray, x2: np.ndarray, ps: PatchSpec, w: int) -> np.ndarray:
    """Patch box -> [-1, 1)^2, returns (n, 2)."""
    if not np.all(filter_with_bounds(x1, x2, ps, w)):
        raise OutOfPatch("coordinate outside the patch passed to the normalizer")
    local1 = np.mod(x1 - ps.a, w)
    local2 = x2 - ps.b
    return np.stack([2.0 * local1 / ps.p - 1.0, 2.0 * local2 / ps.p - 1.0], axis=-1)


def denormalize(coords: np.ndarray, ps: PatchSpec, w: int) -> ErpCoord:
    """Inverse of coord_space_transform, back to global ERP coordinates."""
    local = (coords + 1.0) * ps.p / 2.0
    return ErpCoord(x1=np.mod(ps.a + local[:, 0], w), x2=ps.b + local[:, 1])


def patch_local(coords: np.ndarray, ps: PatchSpec) -> tuple[np.ndarray, np.ndarray]:
    """Normalized coords -> pixel coordinates within the cropped patch array."""
    local = (coords + 1.0) * ps.p / 2.0
    return local[:, 0], local[:, 1]


def dis_samp(img: ErpImage, ps: PatchSpec, spec: ViewportSpec, n: int,
             rng: np.random.Generator) -> tuple[SampleSet, ErpImage]:
    """Build one supervision item; raises EmptyOverlap when nothing survives."""
    patch = crop_patch(img, ps.a, ps.b, ps.p)
    y, c = viewport_grid(spec, img.h, img.w)
    keep = filter_with_bounds(c.x1, c.x2, ps, img.w)
    if not np.any(keep):
        raise EmptyOverlap(f"no viewport grid point lands in patch {(ps.a, ps.b, ps.p)}")
    x1, x2 = c.x1[keep], c.x2[keep]
    uv = np.stack([y.u[keep], y.v[keep]], axis=-1)
    if x1.size > n:
        idx = rng.choice(x1.size, size=n, replace=False)
        x1, x2, uv = x1[idx], x2[idx], uv[idx]
    coords = coord_space_transform(x1, x2, ps, img.w)
    l1, l2 = patch_local(coords, ps)
    pixels = sample_at(ErpImage(pixels=patch), ErpCoord(x1=l1, x2=l2), wrap_x=False)
    lr_patch = ErpImage(pixels=downscale_array(patch, ps.s, wrap_x=False))
    return SampleSet(coords=coords, pixels=pixels, view_uv=uv), lr_patch


def pick_view_for_patch(ps: PatchSpec, h: int, w: int, rng: np.random.Generator,
                        fov_choices_deg=FOV_CHOICES_DEG, res_choices=RES_CHOICES,
                        tie_fovs: bool = False) -> ViewportSpec:
    """View direction at the patch center; FoVs and raster sizes drawn at random."""
    center = erp_to_sphere(
        ErpCoord(x1=np.array(ps.a + (ps.p - 1) / 2.0), x2=np.array(ps.b + (ps.p - 1) / 2.0)),
        h, w)
    fov_h = np.deg2rad(rng.choice(fov_choices_deg))
    fov_v = fov_h if tie_fovs else np.deg2rad(rng.choice(fov_choices_deg))
    return ViewportSpec(
        theta_c=float(np.clip(center.theta, -np.pi / 2, np.pi / 2)),
        phi_c=float(wrap_angle(center.phi)),
        fov_h=float(fov_h), fov_v=float(fov_v),
        h_v=int(rng.choice(res_choices)), w_v=int(rng.choice(res_choices)),
    )
