"""Linear-time quadratic (Renyi) entropy of 1D and 3D point sets.

Samples are splatted into a soft histogram with linear (or trilinear)
interpolation, the histogram is blurred with a small Gaussian, and the
entropy is the negative log of the inner product of the histogram with its
blurred self. The splat Jacobian makes the whole pipeline differentiable
with respect to the samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import InvalidInputError

# Bin width sigma/8 together with the splat-compensated kernel keeps the
# approximation well inside the 0.01% accuracy target; the kernel radius
# truncates the pairwise Gaussian where its mass is ~1e-7 of peak.
BINS_PER_SIGMA = 8.0
RANGE_PAD_SIGMAS = 3.0
KERNEL_RADIUS_SIGMAS = 8.0


class SoftHistogram:
    """Interpolated histogram plus the per-sample splat geometry."""

    def __init__(self, bins, lo, width, base, frac):
        self.bins = bins            # 1D (M,) or 3D (M0, M1, M2) counts
        self.lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        self.width = float(width)
        self.base = base            # (N,) or (N, 3) integer lower fencepost
        self.frac = frac            # matching fractional offsets in [0, 1)


# Fractional bin offset given to the smallest sample.  At f with
# f*(1-f) = 1/6 the linear-splat smearing matches the variance folded into
# the compensated kernel, so even degenerate point masses that would
# otherwise land exactly on a fencepost are handled to leading order.
_ANCHOR_FRAC = 0.5 - 0.5 / np.sqrt(3.0)


def _bin_geometry(x: np.ndarray, sigma: float, bounds=None):
    w = sigma / BINS_PER_SIGMA
    if bounds is None:
        lo = x.min(axis=0)
        hi = x.max(axis=0)
    else:
        # Caller-pinned range: the histogram geometry stays constant across
        # evaluations, so the sample gradient is exact even at the extremes.
        lo = np.atleast_1d(np.asarray(bounds[0], dtype=np.float64))
        hi = np.atleast_1d(np.asarray(bounds[1], dtype=np.float64))
        if np.any(x.min(axis=0) < lo) or np.any(x.max(axis=0) > hi):
            raise InvalidInputError("samples fall outside the pinned range")
    lo = lo - RANGE_PAD_SIGMAS * sigma - _ANCHOR_FRAC * w
    hi = hi + RANGE_PAD_SIGMAS * sigma
    n_bins = np.ceil((hi - lo) / w).astype(int) + 2
    return lo, w, n_bins


def splat(x: np.ndarray, sigma: float, bounds=None) -> SoftHistogram:
    """Splat 1D samples into a linearly interpolated histogram."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise InvalidInputError("cannot splat an empty sample set")
    if not np.all(np.isfinite(x)) or sigma <= 0:
        raise InvalidInputError("samples must be finite and sigma > 0")
    lo, w, m = _bin_geometry(x[:, None], sigma, bounds)
    lo, m = lo[0], int(m[0])
    t = (x - lo) / w
    base = np.floor(t).astype(np.intp)
    frac = t - base
    bins = np.zeros(m)
    np.add.at(bins, base, 1.0 - frac)
    np.add.at(bins, base + 1, frac)
    return SoftHistogram(bins=bins, lo=lo, width=w, base=base, frac=frac)


def splat3(x: np.ndarray, sigma: float, bounds=None) -> SoftHistogram:
    """Splat 3-vector samples into a trilinearly interpolated histogram."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] == 0:
        raise InvalidInputError("expected a nonempty (N, 3) sample array")
    if not np.all(np.isfinite(x)) or sigma <= 0:
        raise InvalidInputError("samples must be finite and sigma > 0")
    lo, w, m = _bin_geometry(x, sigma, bounds)
    t = (x - lo) / w
    base = np.floor(t).astype(np.intp)
    frac = t - base
    bins = np.zeros(tuple(m))
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                wgt = ((frac[:, 0] if dz else 1.0 - frac[:, 0])
                       * (frac[:, 1] if dy else 1.0 - frac[:, 1])
                       * (frac[:, 2] if dx else 1.0 - frac[:, 2]))
                idx = (base[:, 0] + dz, base[:, 1] + dy, base[:, 2] + dx)
                np.add.at(bins, idx, wgt)
    return SoftHistogram(bins=bins, lo=lo, width=w, base=base, frac=frac)


def _gauss_kernel(width: float, sigma: float) -> np.ndarray:
    """Discrete pairwise-affinity kernel per histogram axis.

    Each pairwise distance along an axis passes through two linear splats, and
    a linear splat acts like convolution with a unit triangle of variance
    W^2/6.  Sampling a narrower Gaussian compensates: its variance is reduced
    by W^2/3 and its amplitude raised to preserve total mass, so the effective
    kernel matches exp(-d^2 / (4 sigma^2)) in both mass and variance.
    """
    s2 = sigma * sigma - width * width / 6.0
    if s2 <= 0.0:
        raise ValueError("histogram bins too wide for the affinity bandwidth")
    r = int(np.ceil(KERNEL_RADIUS_SIGMAS * sigma / width))
    d = np.arange(-r, r + 1)
    amp = sigma / np.sqrt(s2)
    return amp * np.exp(-(width * d) ** 2 / (4.0 * s2))


@dataclass
class EntropyResult:
    value: float
    grad_samples: np.ndarray
    grad_bins: np.ndarray


def quadratic_entropy(h: SoftHistogram, sigma: float, n_samples: int) -> EntropyResult:
    """Entropy -log(n^T (n * g)) of a 1D soft histogram, with sample gradient."""
    g = _gauss_kernel(h.width, sigma)
    z = n_samples * n_samples * np.sqrt(4.0 * np.pi * sigma * sigma)
    gn = ndimage.convolve1d(h.bins, g, mode="constant", cval=0.0) / z
    v = float(h.bins @ gn)
    value = -np.log(v)
    grad_bins = (-2.0 / v) * gn
    # Chain through the splat Jacobian: d n[base]/dx = -1/W, d n[base+1]/dx = +1/W.
    grad_x = (grad_bins[h.base + 1] - grad_bins[h.base]) / h.width
    return EntropyResult(value=value, grad_samples=grad_x, grad_bins=grad_bins)


def quadratic_entropy_3d(h: SoftHistogram, sigma: float, n_samples: int) -> EntropyResult:
    """Entropy of a 3D soft histogram via three separable Gaussian blurs."""
    g = _gauss_kernel(h.width, sigma)
    z = n_samples * n_samples * (4.0 * np.pi * sigma * sigma) ** 1.5
    gn = h.bins
    for axis in range(3):
        gn = ndimage.convolve1d(gn, g, axis=axis, mode="constant", cval=0.0)
    gn = gn / z
    v = float((h.bins * gn).sum())
    value = -np.log(v)
    grad_bins = (-2.0 / v) * gn

    frac = h.frac
    grad_x = np.zeros((h.base.shape[0], 3))
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                gb = grad_bins[h.base[:, 0] + dz, h.base[:, 1] + dy, h.base[:, 2] + dx]
                w0 = frac[:, 0] if dz else 1.0 - frac[:, 0]
                w1 = frac[:, 1] if dy else 1.0 - frac[:, 1]
                w2 = frac[:, 2] if dx else 1.0 - frac[:, 2]
                s0 = 1.0 if dz else -1.0
                s1 = 1.0 if dy else -1.0
                s2 = 1.0 if dx else -1.0
                grad_x[:, 0] += gb * s0 * w1 * w2 / h.width
                grad_x[:, 1] += gb * w0 * s1 * w2 / h.width
                grad_x[:, 2] += gb * w0 * w1 * s2 / h.width
    return EntropyResult(value=value, grad_samples=grad_x, grad_bins=grad_bins)


def entropy_1d(x: np.ndarray, sigma: float, bounds=None) -> EntropyResult:
    """Convenience wrapper: splat then evaluate, for 1D samples."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return quadratic_entropy(splat(x, sigma, bounds), sigma, x.size)


def entropy_3d(x: np.ndarray, sigma: float, bounds=None) -> EntropyResult:
    """Convenience wrapper for 3-vector samples."""
    x = np.asarray(x, dtype=np.float64)
    return quadratic_entropy_3d(splat3(x, sigma, bounds), sigma, x.shape[0])


def naive_entropy_1d(x: np.ndarray, sigma: float) -> float:
    """O(N^2) reference evaluation of the pairwise-affinity entropy."""
    x = np.asarray(x, dtype=np.float64).ravel()
    d2 = (x[:, None] - x[None, :]) ** 2
    z = x.size ** 2 * np.sqrt(4.0 * np.pi * sigma * sigma)
    return float(-np.log(np.exp(-d2 / (4.0 * sigma * sigma)).sum() / z))


def naive_entropy_3d(x: np.ndarray, sigma: float) -> float:
    """O(N^2) reference evaluation for 3-vector samples."""
    x = np.asarray(x, dtype=np.float64)
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    z = x.shape[0] ** 2 * (4.0 * np.pi * sigma * sigma) ** 1.5
    return float(-np.log(np.exp(-d2 / (4.0 * sigma * sigma)).sum() / z))
