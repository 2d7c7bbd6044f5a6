"""Self-check oracles runnable from the command line.

Each check recomputes a derived quantity by an independent route (finite
differences, exhaustive search, a closed form) and compares against the
package's fast path, returning (ok, detail-line).  The thorough versions
with from-scratch reimplementations live in the test suite; these are the
operational subset, cheap enough to run on every deploy.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (
    ErpCoord,
    ViewportCoord,
    ViewportSpec,
    erp_to_sphere,
    forward_map,
    inverse_map,
    viewport_pixel_centers,
)
from .nn import ParamStore
from .renderer import Downsampler, ModelConfig
from .resample import ErpImage, bicubic_downscale, downscale_matrix
from .ssr import shape_2d_baseline, shape_at, sphere_diff

_ERP_H, _ERP_W = 256, 512


def random_spec(rng: np.random.Generator, theta_max_deg: float = 89.0) -> ViewportSpec:
    return ViewportSpec(
        theta_c=float(np.deg2rad(rng.uniform(-theta_max_deg, theta_max_deg))),
        phi_c=float(rng.uniform(-np.pi, np.pi)),
        fov_h=float(np.deg2rad(rng.uniform(40.0, 120.0))),
        fov_v=float(np.deg2rad(rng.uniform(40.0, 120.0))),
        h_v=int(rng.integers(16, 257)),
        w_v=int(rng.integers(16, 257)),
    )


def check_roundtrip(seed: int = 0, n_specs: int = 100,
                    tol: float = 1e-9) -> tuple[bool, str]:
    """f(f^-1(y)) = y over full pixel grids of random viewports."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_specs):
        spec = random_spec(rng)
        y = viewport_pixel_centers(spec)
        c = inverse_map(spec, y, _ERP_H, _ERP_W)
        back = forward_map(spec, c, _ERP_H, _ERP_W)
        err = max(np.abs(back.u - y.u).max(), np.abs(back.v - y.v).max())
        worst = max(worst, float(err))
    dt = time.perf_counter() - t0
    return worst < tol, (f"max |f(f^-1(y)) - y| = {worst:.3e} over {n_specs} "
                         f"viewports (tol {tol:g}, {dt:.2f} s)")


def _fd_descriptor(spec: ViewportSpec, y: ViewportCoord, eps: float = 1e-4):
    """Central differences of the package's own viewport->sphere composite,
    in the same normalized-step units as shape_at."""

    def sph(du, dv):
        c = inverse_map(spec, ViewportCoord(u=np.asarray(y.u) + du,
                                            v=np.asarray(y.v) + dv),
                        _ERP_H, _ERP_W)
        return erp_to_sphere(ErpCoord(x1=c.x1, x2=c.x2), _ERP_H, _ERP_W)

    center = sph(0.0, 0.0)
    eu, ev = eps * spec.w_v, eps * spec.h_v  # eps in normalized units

    def d(a, b):
        return sphere_diff(a, b)

    jac_u = d(sph(-eu, 0), sph(eu, 0)) / (2 * eps)
    jac_v = d(sph(0, -ev), sph(0, ev)) / (2 * eps)
    uu = (d(center, sph(eu, 0)) + d(center, sph(-eu, 0))) / eps**2
    vv = (d(center, sph(0, ev)) + d(center, sph(0, -ev))) / eps**2
    uv = (d(sph(-eu, ev), sph(eu, ev)) - d(sph(-eu, -ev), sph(eu, -ev))) / (4 * eps**2)
    jac = np.stack([jac_u, jac_v], axis=-1)
    hess = np.concatenate([
        np.stack([uu[..., 0], uv[..., 0], vv[..., 0]], axis=-1),
        np.stack([uu[..., 1], uv[..., 1], vv[..., 1]], axis=-1),
    ], axis=-1)
    return jac, hess


def _probe_points(spec: ViewportSpec, h_pts: int = 5, w_pts: int = 5) -> ViewportCoord:
    u = np.linspace(1.5, spec.w_v - 2.5, w_pts)
    v = np.linspace(1.5, spec.h_v - 2.5, h_pts)
    uu, vv = np.meshgrid(u, v)
    return ViewportCoord(u=uu.ravel(), v=vv.ravel())


def check_ssr_fd(seed: int = 1, n_specs: int = 12,
                 jac_tol: float = 1e-3, hess_tol: float = 1e-2) -> tuple[bool, str]:
    """Stencil descriptor vs small-step finite differences.

    Restricted to the validated band: probe latitudes |lat| <= 75 deg and
    rasters of at least 96 px per side (the one-pixel stencil's truncation
    error grows quadratically as rasters shrink).
    """
    rng = np.random.default_rng(seed)
    worst_j = worst_h = 0.0
    for _ in range(n_specs):
        spec = random_spec(rng, theta_max_deg=60.0)
        spec = ViewportSpec(spec.theta_c, spec.phi_c, spec.fov_h, spec.fov_v,
                            h_v=int(rng.integers(96, 225)),
                            w_v=int(rng.integers(96, 225)))
        y = _probe_points(spec, 7, 7)
        c = inverse_map(spec, y, _ERP_H, _ERP_W)
        lat = erp_to_sphere(ErpCoord(x1=c.x1, x2=c.x2), _ERP_H, _ERP_W).theta
        keep = np.abs(lat) <= np.deg2rad(75.0)
        y = ViewportCoord(u=y.u[keep], v=y.v[keep])
        got = shape_at(spec, y, _ERP_H, _ERP_W)
        jac, hess = _fd_descriptor(spec, y)
        worst_j = max(worst_j, np.abs(got.jac - jac).max() / np.abs(jac).max())
        worst_h = max(worst_h, np.abs(got.hess - hess).max() / np.abs(hess).max())
    ok = worst_j < jac_tol and worst_h < hess_tol
    return ok, (f"jacobian rel err {worst_j:.2e} (tol {jac_tol:g}), "
                f"hessian rel err {worst_h:.2e} (tol {hess_tol:g})")


def check_downscale(seed: int = 2) -> tuple[bool, str]:
    """Fresh downsampler == plain bicubic (zero-initialized residual), and
    every reduction-matrix row is a partition of unity."""
    rng = np.random.default_rng(seed)
    img = ErpImage(pixels=rng.uniform(0, 1, (3, 32, 64)))
    down = Downsampler(ParamStore(0), ModelConfig(scale=2))
    got = down(Tensor(img.pixels), wrap_x=True).data
    want = bicubic_downscale(img, 2).pixels
    err = float(np.abs(got - want).max())
    rows_ok = all(
        np.allclose(downscale_matrix(n, s, wrap).sum(axis=1), 1.0, atol=1e-12)
        for n in (16, 32, 64) for s in (2, 4) for wrap in (False, True)
    )
    ok = err < 1e-12 and rows_ok
    return ok, f"init-residual deviation {err:.2e}, kernel rows sum to one: {rows_ok}"


def check_gradcheck(seed: int = 3, tol: float = 1e-4) -> tuple[bool, str]:
    """Composite-graph gradient vs central finite differences."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3)
    b = Tensor(rng.normal(size=(4,)) * 0.1)
    m = Tensor(rng.normal(size=(4, 5)))

    def value():
        h = ad.gelu(ad.conv2d(Tensor(x.data), Tensor(w.data), Tensor(b.data),
                              padding=1))
        h = ad.reshape(ad.transpose(h, (0, 2, 3, 1)), (2 * 8 * 8, 4))
        out = ad.sigmoid(ad.matmul(h, Tensor(m.data)))
        return float(ad.sum_(out * out).data)

    h = ad.gelu(ad.conv2d(x, w, b, padding=1))
    h = ad.reshape(ad.transpose(h, (0, 2, 3, 1)), (2 * 8 * 8, 4))
    ad.sum_(ad.sigmoid(ad.matmul(h, m)) ** 2).backward()

    eps = 1e-6
    worst = 0.0
    for t in (x, w, b, m):
        flat = t.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = value()
            flat[idx] = orig - eps
            dn = value()
            flat[idx] = orig
            fd = (up - dn) / (2 * eps)
            got = t.grad.reshape(-1)[idx]
            denom = max(abs(fd), abs(got), 1e-8)
            worst = max(worst, abs(fd - got) / denom)
    return worst < tol, f"worst primitive-graph gradient rel err {worst:.2e} (tol {tol:g})"


ORACLES = {
    "roundtrip": check_roundtrip,
    "ssr-fd": check_ssr_fd,
    "downscale": check_downscale,
    "gradcheck": check_gradcheck,
}


def ssr_latitude_table(fov_deg: float = 90.0) -> list[dict]:
    """Per-latitude descriptor error of the spherical and planar variants
    against finite differences, plus each variant's seam behavior."""
    rows = []
    for lat in (0.0, 30.0, 60.0, 75.0, 80.0, 85.0, 88.0):
        spec = ViewportSpec(theta_c=float(np.deg2rad(lat)), phi_c=0.0,
                            fov_h=float(np.deg2rad(fov_deg)),
                            fov_v=float(np.deg2rad(fov_deg)), h_v=128, w_v=128)
        y = _probe_points(spec)
        jac, _ = _fd_descriptor(spec, y)
        sph = shape_at(spec, y, _ERP_H, _ERP_W)
        pla = shape_2d_baseline(spec, y, _ERP_H, _ERP_W)
        scale = np.abs(jac).max()
        rows.append({
            "latitude_deg": lat,
            "spherical_rel_err": float(np.abs(sph.jac - jac).max() / scale),
            "planar_rel_err": float(np.abs(pla.jac - jac).max() / scale),
        })
    return rows
