"""Mean curvature of a depth map and its gradient backpropagation.

H(Z) = ((1+Zx^2) Zyy - 2 Zx Zy Zxy + (1+Zy^2) Zxx) / (2 (1+Zx^2+Zy^2)^(3/2)),
evaluated with the fixed 3x3 derivative kernels. The intermediates needed by
the chain rule are cached on the returned field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import H3X, H3XX, H3XY, H3Y, H3YY, as_raster, convolve, correlate


@dataclass
class CurvatureField:
    """Mean curvature plus the cached intermediates used for backprop."""

    h: np.ndarray
    d: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    fxx: np.ndarray
    fyy: np.ndarray
    fxy: np.ndarray


def mean_curvature(z: np.ndarray) -> CurvatureField:
    z = as_raster(z, channels=1)
    zx = convolve(z, H3X)
    zy = convolve(z, H3Y)
    zxx = convolve(z, H3XX)
    zyy = convolve(z, H3YY)
    zxy = convolve(z, H3XY)

    m2 = 1.0 + zx * zx + zy * zy
    m = np.sqrt(m2)
    n = (1.0 + zx * zx) * zyy - 2.0 * zx * zy * zxy + (1.0 + zy * zy) * zxx
    d = 2.0 * m2 * m
    h = n / d

    fx = 2.0 * (zx * zyy - zxy * zy) - 3.0 * zx * n / m2
    fy = 2.0 * (zxx * zy - zx * zxy) - 3.0 * zy * n / m2
    fxx = 1.0 + zy * zy
    fyy = 1.0 + zx * zx
    fxy = -2.0 * zx * zy
    return CurvatureField(h=h, d=d, fx=fx, fy=fy, fxx=fxx, fyy=fyy, fxy=fxy)


def backprop_curvature(d_h: np.ndarray, cache: CurvatureField) -> np.ndarray:
    """Chain a gradient with respect to H(Z) back onto Z."""
    b = np.asarray(d_h, dtype=np.float64) / cache.d
    return (correlate(b * cache.fx, H3X)
            + correlate(b * cache.fy, H3Y)
            + correlate(b * cache.fxx, H3XX)
            + correlate(b * cache.fyy, H3YY)
            + correlate(b * cache.fxy, H3XY))
