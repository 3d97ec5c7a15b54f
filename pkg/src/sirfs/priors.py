"""Cost terms of the objective, each returning (cost, gradient).

Reflectance: pairwise-difference GSM smoothness, quadratic-entropy
parsimony, and an absolute spline prior. Shape: GSM on mean-curvature
variation, the isotropy (fronto-parallel) prior, the occluding-contour
prior, and the optional blurred shape-observation term. Illumination: a
quadratic form under a trained Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.special import logsumexp

from . import entropy as ent
from .curvature import CurvatureField, backprop_curvature, mean_curvature
from .grid import (H3X, H3Y, InvalidInputError, Mask, convolve, correlate,
                   gaussian_blur, gaussian_blur_adjoint)
from .render import NormalField, backprop_normals_to_depth, linearize

GSM_COMPONENTS = 40
CONTOUR_SMOOTH_SIGMA = 2.0


# ---------------------------------------------------------------------------
# Gaussian scale mixtures


@dataclass
class GsmModel:
    """Zero-mean discrete Gaussian scale mixture, optionally multivariate.

    For the multivariate case the mixture shares one covariance shape and
    the component scales multiply it, so the negative log-likelihood is a
    function of Mahalanobis distance alone. A lookup table over that
    distance provides the fast evaluation path.
    """

    alphas: np.ndarray
    sigmas: np.ndarray
    covariance: np.ndarray | None = None
    lut_x: np.ndarray | None = None
    lut_f: np.ndarray | None = None

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.alphas.shape != self.sigmas.shape:
            raise InvalidInputError("alphas and sigmas must have equal length")
        if np.any(self.alphas < 0) or abs(self.alphas.sum() - 1.0) > 1e-8:
            raise InvalidInputError("alphas must be a distribution")
        if np.any(self.sigmas <= 0):
            raise InvalidInputError("sigmas must be positive")
        order = np.argsort(self.sigmas)
        self.alphas = self.alphas[order]
        self.sigmas = self.sigmas[order]
        if self.covariance is not None:
            self.covariance = np.asarray(self.covariance, dtype=np.float64)
            self._cov_inv = np.linalg.inv(self.covariance)
            sign, self._cov_logdet = np.linalg.slogdet(self.covariance)
            if sign <= 0:
                raise InvalidInputError("covariance must be positive definite")

    @property
    def dim(self) -> int:
        return 1 if self.covariance is None else self.covariance.shape[0]

    def _nll_of_sq(self, m2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """NLL and its derivative with respect to squared Mahalanobis distance."""
        d = self.dim
        s = self.sigmas ** 2 if d == 1 else self.sigmas
        log_norm = -0.5 * d * np.log(2.0 * np.pi * s)
        if d > 1:
            log_norm = log_norm - 0.5 * self._cov_logdet
        # log alpha_j - m2 / (2 s_j) + log_norm_j, reduced over components.
        a = (np.log(self.alphas) + log_norm)[None, :] - m2[..., None] / (2.0 * s)[None, :]
        m = a.max(axis=-1, keepdims=True)
        w = np.exp(a - m)
        tot = w.sum(axis=-1)
        nll = -(m[..., 0] + np.log(tot))
        d_nll = (w / (2.0 * s)).sum(axis=-1) / tot
        return nll, d_nll

    def cost(self, x: np.ndarray, use_lut: bool = False) -> tuple[float, np.ndarray]:
        """Summed NLL over values (scalars or 3-vectors) and per-value gradient."""
        x = np.asarray(x, dtype=np.float64)
        if self.dim == 1:
            m2 = x * x
            if use_lut and self.lut_x is not None:
                nll, d_nll = self._lut_eval(np.abs(x))
            else:
                nll, d_nll = self._nll_of_sq(m2)
            return float(nll.sum()), d_nll * 2.0 * x
        wx = x @ self._cov_inv
        m2 = (wx * x).sum(axis=-1)
        if use_lut and self.lut_x is not None:
            nll, d_nll = self._lut_eval(np.sqrt(m2))
        else:
            nll, d_nll = self._nll_of_sq(m2)
        return float(nll.sum()), d_nll[:, None] * 2.0 * wx

    def build_lut(self, max_dist: float, n_entries: int = 10_000) -> None:
        """Tabulate the NLL over [0, max_dist]; outside, evaluation is exact."""
        self.lut_x = np.linspace(0.0, float(max_dist), n_entries)
        self.lut_f = self._nll_of_sq(self.lut_x ** 2)[0]

    def _lut_eval(self, dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        inside = dist <= self.lut_x[-1]
        t = dist * ((len(self.lut_x) - 1) / self.lut_x[-1])
        idx = np.clip(t.astype(np.intp), 0, len(self.lut_x) - 2)
        frac = t - idx
        nll = self.lut_f[idx] * (1 - frac) + self.lut_f[idx + 1] * frac
        step = self.lut_x[1] - self.lut_x[0]
        slope = (self.lut_f[idx + 1] - self.lut_f[idx]) / step
        # d nll / d m2 = (d nll / d dist) / (2 dist)
        d_nll = np.where(dist > 0, slope / np.maximum(2.0 * dist, 1e-300), 0.0)
        if not np.all(inside):
            ex_nll, ex_d = self._nll_of_sq(dist[~inside] ** 2)
            nll = np.where(inside, nll, 0.0)
            d_nll = np.where(inside, d_nll, 0.0)
            nll[~inside] = ex_nll
            d_nll[~inside] = ex_d
        return nll, d_nll


# ---------------------------------------------------------------------------
# Pixel-pair graph


PAIR_OFFSETS = [(dy, dx) for dy in range(-2, 3) for dx in range(-2, 3)
                if dy > 0 or (dy == 0 and dx > 0)]


@dataclass
class PairGraph:
    """Signed incidence matrix over deduplicated pixel pairs in 5x5 windows."""

    matrix: sparse.csr_matrix
    n_pairs: int
    shape: tuple[int, int]

    @classmethod
    def build(cls, valid: np.ndarray) -> "PairGraph":
        valid = np.asarray(valid, dtype=bool)
        h, w = valid.shape
        idx = np.arange(h * w).reshape(h, w)
        rows_i, rows_j = [], []
        for dy, dx in PAIR_OFFSETS:
            src = valid.copy()
            # Pair (p, p + (dy, dx)) exists when both endpoints are valid.
            y0a, y1a = max(0, -dy), min(h, h - dy)
            x0a, x1a = max(0, -dx), min(w, w - dx)
            both = valid[y0a:y1a, x0a:x1a] & valid[y0a + dy:y1a + dy, x0a + dx:x1a + dx]
            rows_i.append(idx[y0a:y1a, x0a:x1a][both])
            rows_j.append(idx[y0a + dy:y1a + dy, x0a + dx:x1a + dx][both])
        i_idx = np.concatenate(rows_i)
        j_idx = np.concatenate(rows_j)
        n = i_idx.size
        data = np.concatenate([np.ones(n), -np.ones(n)])
        rows = np.concatenate([np.arange(n), np.arange(n)])
        cols = np.concatenate([i_idx, j_idx])
        mat = sparse.csr_matrix((data, (rows, cols)), shape=(n, h * w))
        return cls(matrix=mat, n_pairs=n, shape=(h, w))

    def diffs(self, img: np.ndarray) -> np.ndarray:
        flat = img.reshape(-1, img.shape[2]) if img.ndim == 3 else img.ravel()
        return self.matrix @ flat

    def scatter(self, grad_pairs: np.ndarray, channels: int = 1) -> np.ndarray:
        g = self.matrix.T @ grad_pairs
        if channels == 1:
            return g.reshape(self.shape)
        return g.reshape(self.shape + (channels,))


# ---------------------------------------------------------------------------
# Reflectance priors


def reflectance_smoothness(r: np.ndarray, graph: PairGraph, model: GsmModel,
                           use_lut: bool = False):
    """GSM cost on pairwise log-reflectance differences."""
    if graph.n_pairs == 0:
        return 0.0, np.zeros_like(r)
    d = graph.diffs(r)
    cost, gd = model.cost(d, use_lut=use_lut)
    grad = graph.scatter(gd, channels=1 if r.ndim == 2 else r.shape[2])
    return cost, grad


@dataclass
class WhiteningTransform:
    """Symmetric 3x3 linear map applied to log-RGB pixels before isotropic costs."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.shape != (3, 3) or not np.allclose(self.w, self.w.T, atol=1e-8):
            raise InvalidInputError("whitening matrix must be symmetric 3x3")

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        return pixels @ self.w.T

    def backprop(self, grad_white: np.ndarray) -> np.ndarray:
        return grad_white @ self.w


def reflectance_parsimony(r: np.ndarray, in_mask: np.ndarray, sigma: float,
                          whitener: WhiteningTransform | None = None,
                          bounds=None):
    """Quadratic entropy of the in-mask reflectance values.

    Grayscale values go straight to the 1D entropy; color pixels are
    whitened first and use the 3D entropy, with the gradient chained back
    through the whitening map. ``bounds`` pins the histogram range so
    repeated evaluations share one geometry (exact gradients during
    optimization).
    """
    if r.ndim == 2:
        vals = r[in_mask]
        res = ent.entropy_1d(vals, sigma, bounds)
        grad = np.zeros_like(r)
        grad[in_mask] = res.grad_samples
        return res.value, grad
    pix = r[in_mask]
    if whitener is not None:
        pix = whitener.apply(pix)
    res = ent.entropy_3d(pix, sigma, bounds)
    g = res.grad_samples
    if whitener is not None:
        g = whitener.backprop(g)
    grad = np.zeros_like(r)
    grad[in_mask] = g
    return res.value, grad


@dataclass
class SplinePrior:
    """Cost lattice over (whitened) log-reflectance, linearly interpolated."""

    grid: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        if not np.all(np.isfinite(self.grid)):
            raise InvalidInputError("spline grid must be finite")

    @property
    def dim(self) -> int:
        return self.grid.ndim

    def _coords(self, x: np.ndarray):
        steps = (self.hi - self.lo) / (np.array(self.grid.shape) - 1)
        t = (x - self.lo) / steps
        # Out-of-domain values clamp to the edge cell; the edge slope steers
        # optimization back into the trained gamut.
        t = np.clip(t, 0.0, np.array(self.grid.shape) - 1 - 1e-9)
        base = np.floor(t).astype(np.intp)
        base = np.minimum(base, np.array(self.grid.shape) - 2)
        return t - base, base, steps

    def evaluate(self, x: np.ndarray):
        """Interpolated cost summed over values, plus per-value gradients."""
        if self.dim == 1:
            x = np.asarray(x, dtype=np.float64).ravel()[:, None]
            frac, base, steps = self._coords(x)
            f0 = self.grid[base[:, 0]]
            f1 = self.grid[base[:, 0] + 1]
            vals = f0 * (1 - frac[:, 0]) + f1 * frac[:, 0]
            return float(vals.sum()), (f1 - f0)[:, None] / steps[0]
        x = np.asarray(x, dtype=np.float64)
        frac, base, steps = self._coords(x)
        total = 0.0
        grad = np.zeros_like(x)
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    g = self.grid[base[:, 0] + dz, base[:, 1] + dy, base[:, 2] + dx]
                    w0 = frac[:, 0] if dz else 1 - frac[:, 0]
                    w1 = frac[:, 1] if dy else 1 - frac[:, 1]
                    w2 = frac[:, 2] if dx else 1 - frac[:, 2]
                    total += float((g * w0 * w1 * w2).sum())
                    s0 = 1.0 if dz else -1.0
                    s1 = 1.0 if dy else -1.0
                    s2 = 1.0 if dx else -1.0
                    grad[:, 0] += g * s0 * w1 * w2 / steps[0]
                    grad[:, 1] += g * w0 * s1 * w2 / steps[1]
                    grad[:, 2] += g * w0 * w1 * s2 / steps[2]
        return total, grad


def reflectance_absolute(r: np.ndarray, in_mask: np.ndarray, prior: SplinePrior,
                         whitener: WhiteningTransform | None = None):
    """Summed spline cost of the in-mask (whitened) reflectance values."""
    if r.ndim == 2:
        vals = r[in_mask]
        cost, g = prior.evaluate(vals)
        grad = np.zeros_like(r)
        grad[in_mask] = g[:, 0]
        return cost, grad
    pix = r[in_mask]
    if whitener is not None:
        pix = whitener.apply(pix)
    cost, g = prior.evaluate(pix)
    if whitener is not None:
        g = whitener.backprop(g)
    grad = np.zeros_like(r)
    grad[in_mask] = g
    return cost, grad


# ---------------------------------------------------------------------------
# Shape priors


def shape_smoothness(z: np.ndarray, graph: PairGraph, model: GsmModel,
                     cache: CurvatureField | None = None, use_lut: bool = False):
    """GSM cost on pairwise differences of mean curvature."""
    if cache is None:
        cache = mean_curvature(z)
    if graph.n_pairs == 0:
        return 0.0, np.zeros_like(z)
    d = graph.diffs(cache.h)
    cost, gd = model.cost(d, use_lut=use_lut)
    grad_h = graph.scatter(gd)
    return cost, backprop_curvature(grad_h, cache)


def shape_isotropy(z: np.ndarray, in_mask: np.ndarray,
                   normals: NormalField | None = None):
    """Fronto-parallel prior: -sum log Nz over the selected pixels."""
    if normals is None:
        normals = linearize(z)
    cost = float(-np.log(normals.nz[in_mask]).sum())
    d_nz = np.zeros_like(normals.nz)
    d_nz[in_mask] = -1.0 / normals.nz[in_mask]
    grad = backprop_normals_to_depth(np.zeros_like(d_nz), np.zeros_like(d_nz),
                                     d_nz, normals)
    return cost, grad


@dataclass
class Contour:
    """Occluding-contour pixels with outward unit normals in the image plane."""

    ys: np.ndarray
    xs: np.ndarray
    nx: np.ndarray
    ny: np.ndarray


def extract_contour(mask: Mask) -> Contour:
    """Boundary pixels with outward normals from a smoothed-mask gradient."""
    b = mask.boundary()
    h, w = mask.shape
    border = np.zeros((h, w), bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    b = b & ~border  # normals undefined where the mask touches the frame
    ys, xs = np.nonzero(b)
    if ys.size == 0:
        raise InvalidInputError("mask has no usable occluding contour")
    sm = ndimage.gaussian_filter(mask.inside.astype(np.float64),
                                 CONTOUR_SMOOTH_SIGMA, mode="nearest")
    gx = convolve(sm, H3X)
    gy = convolve(sm, H3Y)
    nx = -gx[ys, xs]
    ny = -gy[ys, xs]
    norm = np.hypot(nx, ny)
    norm = np.maximum(norm, 1e-12)
    return Contour(ys=ys, xs=xs, nx=nx / norm, ny=ny / norm)


def shape_contour(z: np.ndarray, contour: Contour, gamma: float = 0.75,
                  normals: NormalField | None = None):
    """Limb prior (1 - N.n)^gamma summed over contour pixels."""
    if contour.ys.size == 0:
        raise InvalidInputError("empty contour")
    if normals is None:
        normals = linearize(z)
    dot = (normals.nx[contour.ys, contour.xs] * contour.nx
           + normals.ny[contour.ys, contour.xs] * contour.ny)
    base = 1.0 - dot
    cost = float(np.power(np.maximum(base, 0.0), gamma).sum())
    # gamma < 1 makes the slope unbounded as the normals align; floor the
    # base so gradients stay finite.
    slope = -gamma * np.power(np.maximum(base, 1e-8), gamma - 1.0)
    d_nx = np.zeros_like(z)
    d_ny = np.zeros_like(z)
    d_nx[contour.ys, contour.xs] = slope * contour.nx
    d_ny[contour.ys, contour.xs] = slope * contour.ny
    grad = backprop_normals_to_depth(d_nx, d_ny, np.zeros_like(z), normals)
    return cost, grad


def shape_observation(z: np.ndarray, z_obs: np.ndarray, in_mask: np.ndarray,
                      sigma_z: float = 30.0, gamma_o: float = 1.0,
                      epsilon: float = 0.01):
    """Robust hyperlaplacian cost on a blurred-depth residual."""
    if z.shape != z_obs.shape:
        raise InvalidInputError("shape observation size mismatch")
    r = gaussian_blur(z, sigma_z) - z_obs
    q = r * r + epsilon * epsilon
    cost = float(np.power(q[in_mask], gamma_o / 2.0).sum())
    w = np.zeros_like(z)
    w[in_mask] = gamma_o * r[in_mask] * np.power(q[in_mask], gamma_o / 2.0 - 1.0)
    return cost, gaussian_blur_adjoint(w, sigma_z)


# ---------------------------------------------------------------------------
# Illumination prior


@dataclass
class LightGaussian:
    """Gaussian over SH coefficient vectors, with a cached whitening factor."""

    mu: np.ndarray
    cov: np.ndarray
    reg: float = 1e-6

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).ravel()
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mu.size
        if self.cov.shape != (d, d):
            raise InvalidInputError("light covariance shape mismatch")
        # Small diagonal load: the training sets are tiny and near low-rank.
        c = self.cov + self.reg * (np.trace(self.cov) / d + 1e-12) * np.eye(d)
        self.cov_reg = c
        self.cov_inv = np.linalg.inv(c)
        vals, vecs = np.linalg.eigh(c)
        self.factor = vecs @ np.diag(np.sqrt(vals))       # A with A A^T = cov
        self.factor_inv = np.diag(1.0 / np.sqrt(vals)) @ vecs.T

    @property
    def dim(self) -> int:
        return self.mu.size

    def whiten(self, light: np.ndarray) -> np.ndarray:
        return self.factor_inv @ (np.asarray(light, dtype=np.float64).ravel() - self.mu)

    def unwhiten(self, y: np.ndarray) -> np.ndarray:
        return self.mu + self.factor @ np.asarray(y, dtype=np.float64)

    def backprop_whiten(self, grad_light: np.ndarray) -> np.ndarray:
        return self.factor.T @ np.asarray(grad_light, dtype=np.float64).ravel()


def light_cost(light: np.ndarray, prior: LightGaussian, lam: float):
    """Quadratic illumination cost lam * (L-mu)^T Sigma^-1 (L-mu)."""
    d = np.asarray(light, dtype=np.float64).ravel() - prior.mu
    s = prior.cov_inv @ d
    return float(lam * (d @ s)), 2.0 * lam * s


# ---------------------------------------------------------------------------
# Hyperparameters


@dataclass
class HyperParams:
    """Weights and scales of the combined objective."""

    lambda_s: float = 1.0       # reflectance smoothness
    lambda_e: float = 1.0       # reflectance parsimony
    lambda_a: float = 1.0       # absolute reflectance
    sigma_r: float = 0.1        # parsimony entropy bandwidth
    lambda_k: float = 1.0       # curvature-variation smoothness
    lambda_i: float = 1.0       # isotropy
    lambda_c: float = 1.0       # occluding contour
    gamma_c: float = 0.75       # contour robustness exponent
    lambda_l: float = 1.0       # illumination Gaussian
    lambda_o: float = 0.0       # shape observation (off unless a Z_obs is given)
    gamma_o: float = 1.0
    sigma_z: float = 30.0
    epsilon_o: float = 0.01

    def __post_init__(self):
        for name in ("lambda_s", "lambda_e", "lambda_a", "lambda_k",
                     "lambda_i", "lambda_c", "lambda_l", "lambda_o"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class PriorModel:
    """All trained parameters needed to decompose one image.

    ``color`` selects the color pipeline: a multivariate smoothness GSM, a
    3D absolute-cost lattice over whitened log-RGB, and a 27-dimensional
    illumination Gaussian (one 9-vector per channel).
    """

    hyper: HyperParams
    gsm_reflectance: GsmModel
    gsm_curvature: GsmModel
    light_prior: LightGaussian
    spline: SplinePrior | None = None
    whitening: WhiteningTransform | None = None
    color: bool = False

    def __post_init__(self):
        expected = 27 if self.color else 9
        if self.light_prior.dim != expected:
            raise InvalidInputError("light prior dimension does not match mode")
        if self.color and self.gsm_reflectance.dim != 3:
            raise InvalidInputError("color mode needs a multivariate smoothness GSM")
        if not self.color and self.gsm_reflectance.dim != 1:
            raise InvalidInputError("grayscale mode needs a univariate smoothness GSM")
        if self.spline is not None and self.spline.dim != (3 if self.color else 1):
            raise InvalidInputError("spline dimensionality does not match mode")
