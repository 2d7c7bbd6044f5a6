"""Coordinate systems and the invertible ERP <-> viewport (gnomonic) mapping.

Conventions, fixed once for the whole package:

* ERP raster: pixel centers at integer coordinates, so column ``x1`` has
  longitude ``phi = 2*pi*(x1 + 0.5)/W - pi`` and row ``x2`` has latitude
  ``theta = pi/2 - pi*(x2 + 0.5)/H``.  Longitude spans ``[-pi, pi)`` left to
  right, latitude spans ``[pi/2, -pi/2]`` top to bottom.  Poles sit on the
  raster edges (``x2 = -0.5`` and ``x2 = H - 0.5``).
* 3D frame: ``dir(theta, phi) = (cos t sin p, sin t, cos t cos p)`` -- +y is
  north, +z is (0, 0), +x is longitude +pi/2.
* View rotation: yaw about y then pitch about x, roll fixed to zero.
* Viewport raster: pixel centers at integers, image center at
  ``(w_v/2 - 0.5, h_v/2 - 0.5)``; the tangent-plane extents
  ``[-tan(F/2), tan(F/2)]`` map to the *pixel edges* ``-0.5`` and ``n - 0.5``.

All functions are elementwise over numpy arrays and pure; everything runs in
double precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BehindViewport(ValueError):
    """Raised when a ray points away from the viewport's open hemisphere."""


@dataclass(frozen=True)
class SphericalCoord:
    """Latitude/longitude pair in radians; theta in [-pi/2, pi/2], phi in [-pi, pi)."""

    theta: np.ndarray
    phi: np.ndarray


@dataclass(frozen=True)
class ErpCoord:
    """Continuous ERP pixel coordinate; x1 horizontal in [0, W), x2 vertical in [0, H)."""

    x1: np.ndarray
    x2: np.ndarray


@dataclass(frozen=True)
class ViewportCoord:
    """Continuous viewport pixel coordinate (u horizontal, v vertical, v grows down)."""

    u: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class ViewportSpec:
    """View direction, fields of view (radians) and raster shape of a viewport."""

    theta_c: float
    phi_c: float
    fov_h: float
    fov_v: float
    h_v: int
    w_v: int

    def __post_init__(self):
        if not (-np.pi / 2 <= self.theta_c <= np.pi / 2):
            raise ValueError(f"theta_c out of range: {self.theta_c}")
        if not (0.0 < self.fov_h < np.pi and 0.0 < self.fov_v < np.pi):
            raise ValueError("fields of view must lie strictly inside (0, pi)")
        if self.h_v < 2 or self.w_v < 2:
            raise ValueError("viewport must be at least 2x2")


def wrap_angle(a):
    """Wrap angle(s) to [-pi, pi)."""
    return np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi


def erp_to_sphere(c: ErpCoord, h: int, w: int) -> SphericalCoord:
    x1 = np.asarray(c.x1, dtype=np.float64)
    x2 = np.asarray(c.x2, dtype=np.float64)
    phi = 2.0 * np.pi * (x1 + 0.5) / w - np.pi
    theta = np.pi / 2 - np.pi * (x2 + 0.5) / h
    return SphericalCoord(theta=theta, phi=phi)


def sphere_to_erp(p: SphericalCoord, h: int, w: int) -> ErpCoord:
    theta = np.asarray(p.theta, dtype=np.float64)
    phi = np.asarray(p.phi, dtype=np.float64)
    x1 = np.mod((phi + np.pi) * w / (2.0 * np.pi) - 0.5, w)
    x2 = (np.pi / 2 - theta) * h / np.pi - 0.5
    return ErpCoord(x1=x1, x2=x2)


def sphere_to_unit(p: SphericalCoord) -> np.ndarray:
    """Unit 3D direction(s), shape (..., 3)."""
    theta = np.asarray(p.theta, dtype=np.float64)
    phi = np.asarray(p.phi, dtype=np.float64)
    ct = np.cos(theta)
    return np.stack([ct * np.sin(phi), np.sin(theta), ct * np.cos(phi)], axis=-1)


def unit_to_sphere(v: np.ndarray) -> SphericalCoord:
    v = np.asarray(v, dtype=np.float64)
    theta = np.arcsin(np.clip(v[..., 1], -1.0, 1.0))
    phi = np.arctan2(v[..., 0], v[..., 2])
    # canonicalize the poles to phi = 0 (atan2(0, 0) already gives 0)
    return SphericalCoord(theta=theta, phi=wrap_angle(phi))


def view_rotation(theta_c: float, phi_c: float) -> np.ndarray:
    """World-from-camera rotation: camera +z maps to dir(theta_c, phi_c)."""
    cp, sp = np.cos(phi_c), np.sin(phi_c)
    ct, st = np.cos(theta_c), np.sin(theta_c)
    yaw = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    pitch = np.array([[1.0, 0.0, 0.0], [0.0, ct, st], [0.0, -st, ct]])
    return yaw @ pitch


def _plane_half_extents(spec: ViewportSpec) -> tuple[float, float]:
    return np.tan(spec.fov_h / 2.0), np.tan(spec.fov_v / 2.0)


def forward_map(spec: ViewportSpec, c: ErpCoord, h: int, w: int,
                on_behind: str = "raise") -> ViewportCoord:
    """Gnomonic projection f: ERP coordinate -> viewport coordinate.

    ``on_behind`` selects what happens for rays outside the open forward
    hemisphere: "raise" (default) raises :class:`BehindViewport`, "nan"
    returns NaNs elementwise (useful for bulk searches).
    """
    d = sphere_to_unit(erp_to_sphere(c, h, w))
    cam = d @ view_rotation(spec.theta_c, spec.phi_c)  # == R.T applied row-wise
    z = cam[..., 2]
    behind = z <= 0.0
    if np.any(behind):
        if on_behind == "raise":
            raise BehindViewport("ray lies outside the forward hemisphere")
        z = np.where(behind, np.nan, z)
    tx, ty = _plane_half_extents(spec)
    xp = cam[..., 0] / z
    yp = cam[..., 1] / z
    u = (xp / tx + 1.0) * spec.w_v / 2.0 - 0.5
    v = (-yp / ty + 1.0) * spec.h_v / 2.0 - 0.5
    return ViewportCoord(u=u, v=v)


def inverse_map(spec: ViewportSpec, y: ViewportCoord, h: int, w: int) -> ErpCoord:
    """Backward mapping f^-1: viewport coordinate -> ERP coordinate.

    Total: every viewport coordinate has a ray, including coordinates outside
    the raster bounds (needed by the shape-descriptor stencils).
    """
    u = np.asarray(y.u, dtype=np.float64)
    v = np.asarray(y.v, dtype=np.float64)
    tx, ty = _plane_half_extents(spec)
    xp = (2.0 * (u + 0.5) / spec.w_v - 1.0) * tx
    yp = -(2.0 * (v + 0.5) / spec.h_v - 1.0) * ty
    cam = np.stack([xp, yp, np.ones_like(xp)], axis=-1)
    cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
    world = cam @ view_rotation(spec.theta_c, spec.phi_c).T
    return sphere_to_erp(unit_to_sphere(world), h, w)


def viewport_pixel_centers(spec: ViewportSpec) -> ViewportCoord:
    """All h_v*w_v pixel centers, row-major, as flat arrays."""
    u, v = np.meshgrid(np.arange(spec.w_v, dtype=np.float64),
                       np.arange(spec.h_v, dtype=np.float64))
    return ViewportCoord(u=u.ravel(), v=v.ravel())


def viewport_grid(spec: ViewportSpec, h: int, w: int) -> tuple[ViewportCoord, ErpCoord]:
    """Pixel centers paired with their inverse-map images, row-major."""
    y = viewport_pixel_centers(spec)
    return y, inverse_map(spec, y, h, w)
