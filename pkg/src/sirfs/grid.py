"""Raster containers, masks, filter kernels, and the multiscale pyramid.

Everything downstream (rendering, curvature, the solver) is built on the
small set of linear operators defined here: 3x3 derivative convolutions with
replicate padding, their adjoints (cross-correlations), and a Gaussian-
pyramid analysis/synthesis pair that is an exact adjoint pair by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class InvalidInputError(ValueError):
    """Raised when an input violates a documented precondition."""


def as_raster(data, channels: int | None = None) -> np.ndarray:
    """Validate a dense raster: float64, finite, 2D or 3D (H, W[, C])."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise InvalidInputError(f"raster must be 2D or 3D, got shape {arr.shape}")
    if arr.ndim == 3 and arr.shape[2] not in (1, 3):
        raise InvalidInputError(f"raster channel count must be 1 or 3, got {arr.shape[2]}")
    if channels is not None:
        have = 1 if arr.ndim == 2 else arr.shape[2]
        if have != channels:
            raise InvalidInputError(f"expected {channels} channels, got {have}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("raster contains non-finite values")
    return arr


# 3x3 derivative kernels. First derivatives are 1/8-normalized, second
# derivatives 1/4-normalized; the trained prior scales assume exactly these.
H3X = np.array([[1, 0, -1],
                [2, 0, -2],
                [1, 0, -1]], dtype=np.float64) / 8.0
H3Y = np.array([[1, 2, 1],
                [0, 0, 0],
                [-1, -2, -1]], dtype=np.float64) / 8.0
H3XX = np.array([[1, -2, 1],
                 [2, -4, 2],
                 [1, -2, 1]], dtype=np.float64) / 4.0
H3YY = np.array([[1, 2, 1],
                 [-2, -4, -2],
                 [1, 2, 1]], dtype=np.float64) / 4.0
H3XY = np.array([[1, 0, -1],
                 [0, 0, 0],
                 [-1, 0, 1]], dtype=np.float64) / 4.0

# Separable 4-tap binomial pyramid filter; sum is 8/sqrt(8) = 2*sqrt(2),
# deliberately twice the unit-DC magnitude of a standard Gaussian pyramid.
PYRAMID_FILTER = np.array([1.0, 3.0, 3.0, 1.0]) / np.sqrt(8.0)


def _check_kernel(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise InvalidInputError(f"kernel must be 2D with odd dimensions, got {k.shape}")
    if not np.all(np.isfinite(k)):
        raise InvalidInputError("kernel contains non-finite values")
    return k


def convolve(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Convolve a single-channel raster with a small kernel, replicate padding."""
    img = as_raster(img, channels=1)
    if img.ndim == 3:
        img = img[:, :, 0]
    k = _check_kernel(k)
    return ndimage.convolve(img, k, mode="nearest")


def correlate(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`convolve` under the same replicate padding.

    This is not plain cross-correlation: replicate padding makes the forward
    operator's boundary rows sum clamped samples, so the adjoint must
    scatter-add back into the clamped positions. We build it as correlation
    followed by folding the contributions that the forward pass read from
    out-of-range (clamped) positions back onto the edge pixels.
    """
    img = as_raster(img, channels=1)
    if img.ndim == 3:
        img = img[:, :, 0]
    k = _check_kernel(k)
    ry, rx = k.shape[0] // 2, k.shape[1] // 2
    h, w = img.shape
    # Zero-pad the gradient image, correlate with zero boundary, then fold
    # the padded border back onto the clamped edge pixels.
    pad = np.zeros((h + 2 * ry, w + 2 * rx), dtype=np.float64)
    pad[ry:ry + h, rx:rx + w] = img
    full = ndimage.correlate(pad, k, mode="constant", cval=0.0)
    # Fold rows/cols that the replicate padding clamped.
    out = full
    if ry > 0:
        out[ry, :] += out[:ry, :].sum(axis=0)
        out[ry + h - 1, :] += out[ry + h:, :].sum(axis=0)
    if rx > 0:
        out[:, rx] += out[:, :rx].sum(axis=1)
        out[:, rx + w - 1] += out[:, rx + w:].sum(axis=1)
    return out[ry:ry + h, rx:rx + w].copy()


@dataclass(frozen=True)
class Mask:
    """Boolean inside/outside partition of a raster.

    Construction keeps the largest 4-connected inside component, so the
    stored region is always connected and non-empty.
    """

    inside: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.inside, dtype=bool)
        if m.ndim != 2:
            raise InvalidInputError("mask must be 2D")
        if not m.any():
            raise InvalidInputError("mask has no inside pixels")
        labels, n = ndimage.label(m, structure=np.array([[0, 1, 0],
                                                         [1, 1, 1],
                                                         [0, 1, 0]]))
        if n > 1:
            counts = np.bincount(labels.ravel())
            counts[0] = 0
            m = labels == np.argmax(counts)
        object.__setattr__(self, "inside", m)

    @property
    def shape(self):
        return self.inside.shape

    def interior(self, radius: int = 1) -> np.ndarray:
        """Pixels whose (2r+1)^2 footprint lies entirely inside the mask."""
        return ndimage.binary_erosion(
            self.inside, structure=np.ones((2 * radius + 1, 2 * radius + 1), bool)
        )

    def boundary(self) -> np.ndarray:
        """Inside pixels with at least one 4-neighbor outside."""
        er = ndimage.binary_erosion(
            self.inside,
            structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool),
            border_value=0,
        )
        return self.inside & ~er


def _decimation_matrix(n: int, taps: np.ndarray) -> np.ndarray:
    """1D filter-and-decimate matrix with replicate padding.

    Output ``i`` sums ``taps[k] * x[clip(2*i + k - 1, 0, n-1)]``; keeping even
    output phases makes the adjoint a deterministic zero-insertion upsample.
    """
    m = (n + 1) // 2
    D = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for k, t in enumerate(taps):
            j = min(max(2 * i + k - 1, 0), n - 1)
            D[i, j] += t
    return D


@dataclass
class Pyramid:
    """Linear pyramid operator for one raster shape.

    ``analyze`` maps a fine raster to the stacked pyramid coefficients (the
    operator G); ``synthesize`` is its exact transpose G^T. Level 0 of the
    coefficients is the identity band, so a coefficient vector with only the
    finest level populated synthesizes to that level unchanged.
    """

    shape: tuple[int, int]
    min_size: int = 16
    taps: np.ndarray = field(default_factory=lambda: PYRAMID_FILTER.copy())

    def __post_init__(self):
        self.level_shapes = [tuple(self.shape)]
        self._drow = []
        self._dcol = []
        h, w = self.shape
        while min(h, w) > self.min_size:
            self._drow.append(_decimation_matrix(h, self.taps))
            self._dcol.append(_decimation_matrix(w, self.taps))
            h, w = (h + 1) // 2, (w + 1) // 2
            self.level_shapes.append((h, w))

    @property
    def n_levels(self) -> int:
        return len(self.level_shapes)

    def zeros(self) -> list[np.ndarray]:
        return [np.zeros(s) for s in self.level_shapes]

    def analyze(self, x: np.ndarray) -> list[np.ndarray]:
        """Apply G: fine raster -> list of pyramid levels, fine to coarse."""
        if x.shape != tuple(self.shape):
            raise InvalidInputError(f"expected shape {self.shape}, got {x.shape}")
        levels = [np.asarray(x, dtype=np.float64)]
        cur = levels[0]
        for Dr, Dc in zip(self._drow, self._dcol):
            cur = Dr @ cur @ Dc.T
            levels.append(cur)
        return levels

    def synthesize(self, levels: list[np.ndarray]) -> np.ndarray:
        """Apply G^T: pyramid coefficients -> fine raster. Exact adjoint of analyze."""
        if len(levels) != self.n_levels:
            raise InvalidInputError(
                f"expected {self.n_levels} levels, got {len(levels)}")
        for lv, s in zip(levels, self.level_shapes):
            if lv.shape != s:
                raise InvalidInputError(f"level shape {lv.shape} != expected {s}")
        out = np.array(levels[-1], dtype=np.float64)
        for k in range(self.n_levels - 2, -1, -1):
            out = self._drow[k].T @ out @ self._dcol[k]
            out += levels[k]
        return out

    def flatten(self, levels: list[np.ndarray]) -> np.ndarray:
        return np.concatenate([lv.ravel() for lv in levels])

    def unflatten(self, v: np.ndarray) -> list[np.ndarray]:
        levels, off = [], 0
        for s in self.level_shapes:
            n = s[0] * s[1]
            levels.append(v[off:off + n].reshape(s))
            off += n
        return levels

    @property
    def n_coeffs(self) -> int:
        return sum(s[0] * s[1] for s in self.level_shapes)


def pyramid_1d(n: int, min_size: int = 8, taps: np.ndarray = PYRAMID_FILTER):
    """1D analysis/synthesis pair used by the spline fitter."""
    mats = []
    sizes = [n]
    while n > min_size:
        mats.append(_decimation_matrix(n, taps))
        n = (n + 1) // 2
        sizes.append(n)

    def synthesize(levels):
        out = np.array(levels[-1], dtype=np.float64)
        for k in range(len(mats) - 1, -1, -1):
            out = mats[k].T @ out + levels[k]
        return out

    def analyze(x):
        levels = [np.asarray(x, dtype=np.float64)]
        for D in mats:
            levels.append(D @ levels[-1])
        return levels

    return sizes, analyze, synthesize


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """2D Gaussian blur with replicate padding (the shape-observation kernel)."""
    return ndimage.gaussian_filter(np.asarray(img, dtype=np.float64),
                                   sigma, mode="nearest")


def gaussian_blur_adjoint(g: np.ndarray, sigma: float) -> np.ndarray:
    """Adjoint of :func:`gaussian_blur` under replicate padding."""
    h, w = g.shape
    # Same fold-back trick as correlate(): the kernel is symmetric so the
    # interior part is self-adjoint; only the clamped border needs folding.
    trunc = 4.0
    r = int(trunc * float(sigma) + 0.5)
    pad = np.zeros((h + 2 * r, w + 2 * r), dtype=np.float64)
    pad[r:r + h, r:r + w] = g
    full = ndimage.gaussian_filter(pad, sigma, mode="constant", truncate=trunc)
    if r > 0:
        full[r, :] += full[:r, :].sum(axis=0)
        full[r + h - 1, :] += full[r + h:, :].sum(axis=0)
        full[:, r] += full[:, :r].sum(axis=1)
        full[:, r + w - 1] += full[:, r + w:].sum(axis=1)
    return full[r:r + h, r:r + w].copy()
