"""Joint shape / illumination / reflectance recovery.

The objective is assembled from the prior terms and minimized with L-BFGS
over a multiscale depth parametrization and whitened illumination
coordinates. Reflectance is never an unknown: it is defined as the image
minus the rendered log-shading, so the image formation constraint holds
exactly at every iterate. Reduced modes cover known illumination,
shape-from-shading against a fixed light, and shape-from-contour.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .curvature import mean_curvature
from .grid import InvalidInputError, Mask, Pyramid
from .priors import (PairGraph, PriorModel, extract_contour, light_cost,
                     reflectance_absolute, reflectance_parsimony,
                     reflectance_smoothness, shape_contour, shape_isotropy,
                     shape_observation, shape_smoothness)
from .render import (backprop_to_depth, backprop_to_light, linearize,
                     render_logshading)

LBFGS_MEMORY = 10
MAX_ITERS = 500
SFS_LAMBDA_DEFAULT = 10.0
SFS_DELTA = 1e-4
ENTROPY_RANGE_MARGIN = 1.0


@dataclass
class SolveReport:
    iterations: int
    final_loss: float
    terms: dict
    converged: bool
    wall_time: float


@dataclass
class SirfsState:
    """Optimization variables: pyramid depth coefficients and, when the
    illumination is free, whitened light coordinates."""

    pyramid: Pyramid
    y: np.ndarray
    y_light: np.ndarray | None

    def depth(self) -> np.ndarray:
        return self.pyramid.synthesize(self.pyramid.unflatten(self.y))


class Problem:
    """Binds one image/mask/model and exposes a flat (loss, grad) callable.

    ``mode`` selects the data coupling: "sirfs" defines reflectance as
    image minus rendered shading and applies the reflectance priors to it;
    "sfs" penalizes a smoothed absolute rendering residual against a fixed
    light; "contour" uses no image at all.
    """

    def __init__(self, image, mask: Mask, model: PriorModel, *,
                 mode: str = "sirfs", light=None, z_obs=None,
                 single_scale: bool = False,
                 sfs_lambda: float = SFS_LAMBDA_DEFAULT):
        if mode not in ("sirfs", "sfs", "contour"):
            raise InvalidInputError(f"unknown mode {mode!r}")
        self.mode = mode
        self.mask = mask
        self.model = model
        self.z_obs = z_obs
        self.sfs_lambda = sfs_lambda
        h, w = mask.shape
        self.image = None
        if mode != "contour":
            self.image = np.asarray(image, dtype=np.float64)
            if self.image.shape[:2] != (h, w):
                raise InvalidInputError("image and mask sizes differ")
            if model.color != (self.image.ndim == 3):
                raise InvalidInputError("image channel count does not match model")
        min_size = max(h, w) if single_scale else 16
        self.pyramid = Pyramid((h, w), min_size=min_size)
        self.in_px = mask.interior(1)
        self.graph = PairGraph.build(self.in_px)
        self.contour = extract_contour(mask)
        self.optimize_light = mode == "sirfs" and light is None
        self.light_fixed = None
        if light is not None:
            self.light_fixed = np.asarray(light, dtype=np.float64)
        if mode == "sfs" and self.light_fixed is None:
            raise InvalidInputError("shape-from-shading needs a known light")
        self.n_light = model.light_prior.dim if self.optimize_light else 0
        self._ent_bounds = None

    # -- state packing -----------------------------------------------------

    def initial_vector(self) -> np.ndarray:
        y = np.zeros(self.pyramid.n_coeffs)
        if not self.optimize_light:
            return y
        # start from zero illumination expressed in whitened coordinates
        y_l = self.model.light_prior.whiten(np.zeros(self.n_light))
        return np.concatenate([y, y_l])

    def unpack(self, vec: np.ndarray) -> SirfsState:
        n = self.pyramid.n_coeffs
        y_l = vec[n:] if self.optimize_light else None
        return SirfsState(pyramid=self.pyramid, y=vec[:n], y_light=y_l)

    def light_of(self, state: SirfsState) -> np.ndarray | None:
        if not self.optimize_light:
            return self.light_fixed
        l = self.model.light_prior.unwhiten(state.y_light)
        return l.reshape(3, 9) if self.model.color else l

    # -- loss --------------------------------------------------------------

    def _parsimony_bounds(self, r):
        pix = r[self.in_px]
        if self.model.whitening is not None and r.ndim == 3:
            pix = self.model.whitening.apply(pix)
        lo, hi = pix.min(axis=0), pix.max(axis=0)
        b = self._ent_bounds
        if b is None or np.any(lo < b[0]) or np.any(hi > b[1]):
            m = ENTROPY_RANGE_MARGIN
            self._ent_bounds = (lo - m, hi + m)
        return self._ent_bounds

    def loss(self, vec: np.ndarray):
        state = self.unpack(vec)
        z = state.depth()
        hp = self.model.hyper
        normals = linearize(z)
        terms = {}
        grad_z = np.zeros_like(z)
        grad_light_flat = None

        if self.mode != "contour":
            light = self.light_of(state)
            s = render_logshading(normals, light)
            if self.mode == "sirfs":
                r = self.image - s
                grad_r = np.zeros_like(r)
                if hp.lambda_s > 0:
                    c, g = reflectance_smoothness(r, self.graph,
                                                  self.model.gsm_reflectance)
                    terms["reflectance_smoothness"] = hp.lambda_s * c
                    grad_r += hp.lambda_s * g
                if hp.lambda_e > 0:
                    bounds = self._parsimony_bounds(r)
                    c, g = reflectance_parsimony(r, self.in_px, hp.sigma_r,
                                                 whitener=self.model.whitening,
                                                 bounds=bounds)
                    terms["reflectance_parsimony"] = hp.lambda_e * c
                    grad_r += hp.lambda_e * g
                if hp.lambda_a > 0 and self.model.spline is not None:
                    c, g = reflectance_absolute(r, self.in_px, self.model.spline,
                                                whitener=self.model.whitening)
                    terms["reflectance_absolute"] = hp.lambda_a * c
                    grad_r += hp.lambda_a * g
                d_s = -grad_r
            else:  # sfs: robust absolute residual over the mask
                resid = self.image - s
                inside = self.mask.inside
                if resid.ndim == 3:
                    inside = np.broadcast_to(inside[:, :, None], resid.shape)
                root = np.sqrt(resid * resid + SFS_DELTA**2)
                terms["data"] = self.sfs_lambda * float(root[inside].sum())
                d_s = np.where(inside, -self.sfs_lambda * resid / root, 0.0)
            if np.any(d_s != 0):
                grad_z += backprop_to_depth(d_s, normals, light)
            if self.optimize_light:
                grad_light_flat = backprop_to_light(d_s, normals).ravel()
                if hp.lambda_l > 0:
                    c, g = light_cost(np.asarray(light).ravel(),
                                      self.model.light_prior, hp.lambda_l)
                    terms["light"] = c
                    grad_light_flat = grad_light_flat + g

        cache = mean_curvature(z)
        if hp.lambda_k > 0:
            c, g = shape_smoothness(z, self.graph, self.model.gsm_curvature,
                                    cache=cache)
            terms["shape_smoothness"] = hp.lambda_k * c
            grad_z += hp.lambda_k * g
        if hp.lambda_i > 0:
            c, g = shape_isotropy(z, self.in_px, normals)
            terms["isotropy"] = hp.lambda_i * c
            grad_z += hp.lambda_i * g
        if hp.lambda_c > 0:
            c, g = shape_contour(z, self.contour, hp.gamma_c, normals)
            terms["contour"] = hp.lambda_c * c
            grad_z += hp.lambda_c * g
        if hp.lambda_o > 0 and self.z_obs is not None:
            c, g = shape_observation(z, self.z_obs, self.mask.inside,
                                     sigma_z=hp.sigma_z, gamma_o=hp.gamma_o,
                                     epsilon=hp.epsilon_o)
            terms["observation"] = hp.lambda_o * c
            grad_z += hp.lambda_o * g

        for name, value in terms.items():
            if not np.isfinite(value):
                raise InvalidInputError(f"loss term {name!r} is not finite")
        total = float(sum(terms.values()))
        grad_y = self.pyramid.flatten(self.pyramid.analyze(grad_z))
        if not self.optimize_light:
            return total, terms, grad_y
        grad_yl = self.model.light_prior.backprop_whiten(grad_light_flat)
        return total, terms, np.concatenate([grad_y, grad_yl])

    def objective(self, vec: np.ndarray):
        total, _, grad = self.loss(vec)
        return total, grad


def _minimize(problem: Problem, max_iters: int):
    t0 = time.perf_counter()
    history = []

    def record(vec):
        history.append(problem.objective(vec)[0])

    res = optimize.minimize(problem.objective, problem.initial_vector(),
                            jac=True, method="L-BFGS-B", callback=record,
                            options={"maxiter": max_iters,
                                     "maxcor": LBFGS_MEMORY,
                                     "ftol": 1e-12, "gtol": 1e-8})
    total, terms, _ = problem.loss(res.x)
    report = SolveReport(iterations=int(res.nit), final_loss=total,
                         terms={k: float(v) for k, v in terms.items()},
                         converged=bool(res.success),
                         wall_time=time.perf_counter() - t0)
    return res.x, report, history


def solve_sirfs(image, mask: Mask, model: PriorModel, *, light=None,
                z_obs=None, single_scale: bool = False,
                max_iters: int = MAX_ITERS):
    """Recover (Z, R, L) from one masked log-image.

    Pass ``light`` to hold the illumination fixed (known-light variant) and
    ``z_obs`` with a nonzero observation weight to fold in coarse external
    shape. Returns (Z, R, L, SolveReport).
    """
    prob = Problem(image, mask, model, mode="sirfs", light=light, z_obs=z_obs,
                   single_scale=single_scale)
    x, report, _ = _minimize(prob, max_iters)
    state = prob.unpack(x)
    z = state.depth()
    l = prob.light_of(state)
    r = np.asarray(image, dtype=np.float64) - render_logshading(linearize(z), l)
    return z, r, l, report


def solve_sfs(image, mask: Mask, light, model: PriorModel, *,
              lam: float = SFS_LAMBDA_DEFAULT, single_scale: bool = False,
              max_iters: int = MAX_ITERS):
    """Classic shape-from-shading under a known light; returns (Z, report)."""
    prob = Problem(image, mask, model, mode="sfs", light=light,
                   single_scale=single_scale, sfs_lambda=lam)
    x, report, _ = _minimize(prob, max_iters)
    return prob.unpack(x).depth(), report


def solve_contour(mask: Mask, model: PriorModel, *,
                  single_scale: bool = False, max_iters: int = MAX_ITERS):
    """Inflate a silhouette using the shape priors alone; returns (Z, report)."""
    prob = Problem(None, mask, model, mode="contour", single_scale=single_scale)
    x, report, _ = _minimize(prob, max_iters)
    return prob.unpack(x).depth(), report


def relight(z: np.ndarray, r: np.ndarray, light_new: np.ndarray) -> np.ndarray:
    """Re-render a decomposition under a new light, in linear intensity."""
    s = render_logshading(linearize(np.asarray(z, dtype=np.float64)), light_new)
    r = np.asarray(r, dtype=np.float64)
    if r.shape != s.shape:
        raise InvalidInputError("reflectance and rendered shading differ in shape")
    return np.exp(r + s)
