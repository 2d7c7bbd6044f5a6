"""Spherical pixel-shape descriptors: numerical Jacobian/Hessian of the
viewport -> sphere map, estimated by central differences on a 3x3 stencil.

A viewport pixel's preimage on the sphere is anisotropic and
latitude-dependent; a 10-vector of first and second derivatives of the
backward map summarizes that local shape for the renderer.  Differences
between sphere points are taken along minor arcs (longitude wraps) and the
longitude component is scaled by the cosine of the mean latitude, so the
descriptor is smooth across the +-pi seam and metrically meaningful near the
poles.  A historical variant that places the cosine on the latitude component
instead is kept behind ``variant="as_written"``; the default is validated
against finite differences.

Stencil numbering is row-major with the center fifth:

    p1 p2 p3      (one pixel up)
    p4 p5 p6
    p7 p8 p9      (one pixel down)

Neighbor offsets are one raster pixel, i.e. (1/w_v, 1/h_v) in viewport
coordinates normalized to [0, 1]; with ``normalize_steps`` (default) the
entries approximate true partial derivatives with respect to those
normalized coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    ErpCoord,
    SphericalCoord,
    ViewportCoord,
    ViewportSpec,
    erp_to_sphere,
    inverse_map,
    viewport_pixel_centers,
)

_OFFSETS = [(-1, -1), (0, -1), (1, -1),
            (-1, 0), (0, 0), (1, 0),
            (-1, 1), (0, 1), (1, 1)]  # (du, dv) for p1..p9


@dataclass(frozen=True)
class SphereStencil:
    p1: SphericalCoord
    p2: SphericalCoord
    p3: SphericalCoord
    p4: SphericalCoord
    p5: SphericalCoord
    p6: SphericalCoord
    p7: SphericalCoord
    p8: SphericalCoord
    p9: SphericalCoord


@dataclass(frozen=True)
class ShapeDescriptor:
    """jac: (..., 2, 2) rows = (longitude-like, latitude-like) components,
    cols = (d/du, d/dv); hess: (..., 6) as [uu1, uv1, vv1, uu2, uv2, vv2]."""

    jac: np.ndarray
    hess: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.jac.reshape(self.jac.shape[:-2] + (4,)), self.hess], axis=-1)


def _wrap_signed(d: np.ndarray) -> np.ndarray:
    # signed minor arc: magnitude equals min(|d|, 2pi - |d|)
    return d - 2.0 * np.pi * np.round(d / (2.0 * np.pi))


def sphere_diff(pi: SphericalCoord, pj: SphericalCoord,
                variant: str = "corrected") -> np.ndarray:
    """Signed displacement from p_i to p_j, shape (..., 2).

    Component 0 is the minor-arc longitude difference, component 1 the
    latitude difference; cos(mean latitude) scales the longitude
    ("corrected", metric convention) or the latitude ("as_written").
    """
    dlon = _wrap_signed(np.asarray(pj.phi) - np.asarray(pi.phi))
    dlat = np.asarray(pj.theta) - np.asarray(pi.theta)
    c = np.cos((np.asarray(pi.theta) + np.asarray(pj.theta)) / 2.0)
    if variant == "corrected":
        dlon = c * dlon
    elif variant == "as_written":
        dlat = c * dlat
    else:
        raise ValueError(f"unknown variant: {variant}")
    return np.stack([dlon, dlat], axis=-1)


def build_stencil(spec: ViewportSpec, y: ViewportCoord, h: int, w: int) -> SphereStencil:
    """Sphere images of y and its eight one-pixel neighbors (may leave the raster)."""
    u = np.asarray(y.u, dtype=np.float64)
    v = np.asarray(y.v, dtype=np.float64)
    pts = []
    for du, dv in _OFFSETS:
        c = inverse_map(spec, ViewportCoord(u=u + du, v=v + dv), h, w)
        pts.append(erp_to_sphere(ErpCoord(x1=c.x1, x2=c.x2), h, w))
    return SphereStencil(*pts)


def _planar_diff(pi: SphericalCoord, pj: SphericalCoord) -> np.ndarray:
    # seam-naive baseline: plain angle differences, no wrap, no metric factor
    return np.stack([np.asarray(pj.phi) - np.asarray(pi.phi),
                     np.asarray(pj.theta) - np.asarray(pi.theta)], axis=-1)


def _assemble(st: SphereStencil, diff, spec: ViewportSpec,
              normalize_steps: bool) -> ShapeDescriptor:
    du = diff(st.p4, st.p6)            # across the center row
    dv = diff(st.p2, st.p8)            # down the center column
    uu = diff(st.p5, st.p6) + diff(st.p5, st.p4)
    vv = diff(st.p5, st.p2) + diff(st.p5, st.p8)
    uv = diff(st.p7, st.p9) - diff(st.p1, st.p3)
    if normalize_steps:
        hu, hv = 1.0 / spec.w_v, 1.0 / spec.h_v
        du = du / (2.0 * hu)
        dv = dv / (2.0 * hv)
        uu = uu / hu**2
        vv = vv / hv**2
        uv = uv / (4.0 * hu * hv)
    jac = np.stack([du, dv], axis=-1)  # (..., 2 components, 2 directions)
    hess = np.concatenate([
        np.stack([uu[..., 0], uv[..., 0], vv[..., 0]], axis=-1),
        np.stack([uu[..., 1], uv[..., 1], vv[..., 1]], axis=-1),
    ], axis=-1)
    return ShapeDescriptor(jac=jac, hess=hess)


def shape_at(spec: ViewportSpec, y: ViewportCoord, h: int, w: int,
             normalize_steps: bool = True, variant: str = "corrected") -> ShapeDescriptor:
    """Shape descriptor(s) at viewport coordinate(s) y."""
    st = build_stencil(spec, y, h, w)
    return _assemble(st, lambda a, b: sphere_diff(a, b, variant), spec, normalize_steps)


def shape_2d_baseline(spec: ViewportSpec, y: ViewportCoord, h: int, w: int,
                      normalize_steps: bool = True) -> ShapeDescriptor:
    """Ablation baseline: identical stencil arithmetic on raw (unwrapped,
    unscaled) angle coordinates.  Discontinuous across the longitude seam and
    metrically wrong at high latitude, by construction."""
    st = build_stencil(spec, y, h, w)
    return _assemble(st, _planar_diff, spec, normalize_steps)


def shape_grid(spec: ViewportSpec, h: int, w: int,
               variant: str = "corrected") -> ShapeDescriptor:
    """Descriptors at every pixel center, row-major (matches viewport_grid)."""
    return shape_at(spec, viewport_pixel_centers(spec), h, w, variant=variant)
