"""Image quality metrics: PSNR, SSIM, and latitude-weighted PSNR for ERP.

All metrics take (3, h, w) float arrays in [0, 1].  PSNR is capped at a
99 dB sentinel so identical inputs produce a finite, comparable number.
The ERP variant weights each row's squared error by the cosine of its
latitude, which is proportional to the sphere area an ERP row represents,
so pole rows (hugely oversampled by the projection) count less.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    ws_psnr: float | None = None  # ERP images only


def _check_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _db(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return _db(float(np.mean((a - b) ** 2)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size, dtype=float) - (size - 1) / 2.0
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    return g / g.sum()


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity, 11x11 Gaussian window, channels averaged."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1, c2 = k1**2, k2**2  # data range is 1.0
    g = _gaussian_window()

    def blur(x):
        # separable window; nearest-edge padding keeps border windows valid
        x = convolve1d(x, g, axis=-1, mode="nearest")
        return convolve1d(x, g, axis=-2, mode="nearest")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    r = len(g) // 2
    if s.shape[-2] > 2 * r and s.shape[-1] > 2 * r:
        s = s[..., r:-r, r:-r]  # fully-supported windows only
    return float(s.mean())


def erp_row_weights(h: int) -> np.ndarray:
    """Per-row sphere-area weights w(x2) = cos(pi*(x2 + 0.5 - h/2)/h), normalized."""
    x2 = np.arange(h, dtype=float)
    w = np.cos(np.pi * (x2 + 0.5 - h / 2.0) / h)
    return w / w.sum()


def ws_psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    w = erp_row_weights(a.shape[-2])
    mse_rows = np.mean((a - b) ** 2, axis=(0, 2))  # (h,)
    return _db(float(np.sum(w * mse_rows)))


def metric_suite(pred: np.ndarray, gt: np.ndarray, kind: str = "viewport") -> MetricReport:
    if kind not in ("viewport", "erp"):
        raise ValueError(f"unknown image kind: {kind}")
    return MetricReport(
        psnr=psnr(pred, gt),
        ssim=ssim(pred, gt),
        ws_psnr=ws_psnr(pred, gt) if kind == "erp" else None,
    )
