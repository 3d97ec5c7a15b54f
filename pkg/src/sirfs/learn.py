"""Fitting the prior parameters from training data.

Gaussian scale mixtures are fit with expectation-maximization, the
absolute-reflectance cost curves by penalized maximum likelihood over a
histogram, the illumination Gaussian by sample moments, and the objective
weights by coordinate descent over multiplicative steps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .grid import InvalidInputError, pyramid_1d
from .priors import (GSM_COMPONENTS, GsmModel, HyperParams, LightGaussian,
                     SplinePrior, WhiteningTransform)

SIGMA_FLOOR = 1e-4
EM_MAX_ITERS = 500
EM_TOL = 1e-8
SPLINE_BINS_1D = 64
SPLINE_BINS_3D = 32
SPLINE_EPSILON = 1e-4


# ---------------------------------------------------------------------------
# Gaussian scale mixtures


def _init_sigmas(scale_samples: np.ndarray, m: int) -> np.ndarray:
    lo = max(np.percentile(scale_samples, 1), SIGMA_FLOOR)
    hi = max(np.percentile(scale_samples, 99), lo * (1 + 1e-6))
    return np.geomspace(lo, hi, m)


def fit_gsm_univariate(samples: np.ndarray, m: int = GSM_COMPONENTS,
                       return_trace: bool = False):
    """EM fit of a zero-mean mixture of M Gaussians to scalar samples."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 10 * m:
        raise InvalidInputError(f"need at least {10 * m} samples for {m} components")
    x2 = x * x
    sigmas = _init_sigmas(np.abs(x), m)
    alphas = np.full(m, 1.0 / m)
    trace = []
    prev = -np.inf
    for _ in range(EM_MAX_ITERS):
        log_p = (np.log(alphas) - 0.5 * np.log(2 * np.pi * sigmas**2)
                 - x2[:, None] / (2 * sigmas**2))
        norm = logsumexp(log_p, axis=1)
        ll = float(norm.mean())
        trace.append(ll)
        resp = np.exp(log_p - norm[:, None])
        weight = resp.sum(axis=0)
        alphas = weight / x.size
        sigmas = np.sqrt((resp * x2[:, None]).sum(axis=0)
                         / np.maximum(weight, 1e-300))
        sigmas = np.maximum(sigmas, SIGMA_FLOOR)
        if ll - prev < EM_TOL:
            break
        prev = ll
    alphas = np.maximum(alphas, 1e-300)
    model = GsmModel(alphas=alphas / alphas.sum(), sigmas=sigmas)
    return (model, trace) if return_trace else model


def fit_gsm_multivariate(samples: np.ndarray, m: int = GSM_COMPONENTS,
                         return_trace: bool = False):
    """EM fit of a scale mixture sharing one 3x3 covariance shape.

    Component j is N(0, s_j * Sigma), so the likelihood depends on the
    Mahalanobis distance alone; the scales absorb the radial profile while
    Sigma captures the (color) correlation structure.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise InvalidInputError("expected (N, 3) samples")
    n, d = x.shape
    if n < 10 * m:
        raise InvalidInputError(f"need at least {10 * m} samples for {m} components")
    cov = x.T @ x / n
    cov += 1e-8 * (np.trace(cov) / d + 1e-12) * np.eye(d)
    cov_inv = np.linalg.inv(cov)
    m2 = ((x @ cov_inv) * x).sum(axis=1)
    scales = _init_sigmas(m2 / d, m)
    alphas = np.full(m, 1.0 / m)
    trace = []
    prev = -np.inf
    for _ in range(EM_MAX_ITERS):
        sign, logdet = np.linalg.slogdet(cov)
        log_p = (np.log(alphas) - 0.5 * d * np.log(2 * np.pi * scales)
                 - 0.5 * logdet - m2[:, None] / (2 * scales))
        norm = logsumexp(log_p, axis=1)
        ll = float(norm.mean())
        trace.append(ll)
        resp = np.exp(log_p - norm[:, None])
        weight = resp.sum(axis=0)
        alphas = weight / n
        # M-step: scales from per-component Mahalanobis moments, then the
        # shared shape from scale-deflated outer products.
        scales = np.maximum((resp * m2[:, None]).sum(axis=0)
                            / np.maximum(d * weight, 1e-300), SIGMA_FLOOR**2)
        w = (resp / scales).sum(axis=1)
        cov = (x * w[:, None]).T @ x / n
        cov += 1e-10 * (np.trace(cov) / d + 1e-12) * np.eye(d)
        # The overall magnitude can sit in either factor; pin the scales'
        # mixture mean to one so the model is identifiable.
        mean_scale = float(alphas @ scales)
        scales = scales / mean_scale
        cov = cov * mean_scale
        cov_inv = np.linalg.inv(cov)
        m2 = ((x @ cov_inv) * x).sum(axis=1)
        if ll - prev < EM_TOL:
            break
        prev = ll
    alphas = np.maximum(alphas, 1e-300)
    model = GsmModel(alphas=alphas / alphas.sum(), sigmas=scales, covariance=cov)
    return (model, trace) if return_trace else model


# ---------------------------------------------------------------------------
# Whitening


def fit_whitening(pixels: np.ndarray, exponent: float = 0.5) -> WhiteningTransform:
    """Symmetric map (X Xᵀ)^exponent from the uncentered second moment.

    The default exponent +1/2 scales *up* high-variance color directions;
    pass -1/2 for the conventional variance-normalizing map.
    """
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] < 3:
        raise InvalidInputError("expected at least three (N, 3) pixels")
    second = x.T @ x
    vals, vecs = np.linalg.eigh(second)
    vals = np.maximum(vals, 1e-12 * max(vals.max(), 1e-300))
    w = (vecs * vals**exponent) @ vecs.T
    return WhiteningTransform(w=w)


# ---------------------------------------------------------------------------
# Absolute-reflectance cost curves


def _curvature_1d(f: np.ndarray):
    d2 = f[:-2] - 2 * f[1:-1] + f[2:]
    return d2


def _spline_objective_1d(f: np.ndarray, counts: np.ndarray, lam: float):
    n = counts.sum()
    ls = logsumexp(-f)
    cost = float(f @ counts) / n + ls
    grad = counts / n - np.exp(-f - ls)
    d2 = _curvature_1d(f)
    root = np.sqrt(d2 * d2 + SPLINE_EPSILON**2)
    cost += lam * float(root.sum())
    gs = lam * d2 / root
    grad[:-2] += gs
    grad[1:-1] -= 2 * gs
    grad[2:] += gs
    return cost, grad


def fit_spline_1d(counts: np.ndarray, lo: float, hi: float, lam: float,
                  n_bins: int = SPLINE_BINS_1D, return_trace: bool = False):
    """Penalized maximum-likelihood cost curve over a 1D histogram.

    The curve is reparametrized through a 1D pyramid so coarse structure is
    reachable in few optimizer steps, and shifted afterwards so exp(-f)
    integrates to one over [lo, hi].
    """
    counts = np.asarray(counts, dtype=np.float64).ravel()
    if counts.size != n_bins:
        counts = _rebin(counts, n_bins)
    if counts.sum() <= 0:
        raise InvalidInputError("histogram is empty")
    if lam <= 0 or hi <= lo:
        raise InvalidInputError("need lam > 0 and hi > lo")
    sizes, analyze, synthesize = pyramid_1d(n_bins)
    splits = np.cumsum(sizes)[:-1]

    def unpack(vec):
        return np.split(vec, splits)

    trace = []

    def objective(vec):
        f = synthesize(unpack(vec))
        cost, grad = _spline_objective_1d(f, counts, lam)
        return cost, np.concatenate(analyze(grad))

    def record(vec):
        trace.append(objective(vec)[0])

    x0 = np.zeros(int(np.sum(sizes)))
    res = optimize.minimize(objective, x0, jac=True, method="L-BFGS-B",
                            callback=record if return_trace else None,
                            options={"maxiter": 2000, "ftol": 1e-12,
                                     "gtol": 1e-10})
    f = synthesize(unpack(res.x))
    step = (hi - lo) / (n_bins - 1)
    f = f + np.log(np.exp(-f).sum() * step)  # normalize exp(-f) to a density
    prior = SplinePrior(grid=f, lo=[lo], hi=[hi])
    return (prior, trace) if return_trace else prior


def _rebin(counts: np.ndarray, n_bins: int) -> np.ndarray:
    edges = np.linspace(0, counts.size, n_bins + 1)
    idx = np.clip(np.floor(np.linspace(0, n_bins - 1e-9, counts.size)), 0,
                  n_bins - 1).astype(int)
    out = np.zeros(n_bins)
    np.add.at(out, idx, counts)
    return out


def _thin_plate(f: np.ndarray, lam: float):
    """lam * sum sqrt(J + eps^2) with J the squared second-derivative energy."""
    terms = []
    j = np.zeros_like(f)
    specs = [((0,), 1.0), ((1,), 1.0), ((2,), 1.0),
             ((0, 1), 2.0), ((1, 2), 2.0), ((0, 2), 2.0)]
    for axes, w in specs:
        pad = [(0, 0)] * 3
        if len(axes) == 1:
            a = axes[0]
            d = np.diff(f, 2, axis=a)
            pad[a] = (1, 1)
        else:
            a, b = axes
            d = np.diff(np.diff(f, 1, axis=a), 1, axis=b)
            pad[a] = pad[b] = (0, 1)
        terms.append((axes, w, d, pad))
        sl = tuple(slice(p[0], s - p[1]) for p, s in zip(pad, f.shape))
        j[sl] += w * d * d
    root = np.sqrt(j + SPLINE_EPSILON**2)
    cost = lam * float(root.sum())
    grad = np.zeros_like(f)
    for axes, w, d, pad in terms:
        sl = tuple(slice(p[0], s - p[1]) for p, s in zip(pad, f.shape))
        gd = lam * w * d / root[sl]
        if len(axes) == 1:
            a = axes[0]
            stencil = np.zeros_like(f)
            # adjoint of the centered second difference along axis a
            idx0 = [slice(None)] * 3
            for off, coef in ((0, 1.0), (1, -2.0), (2, 1.0)):
                tgt = [slice(None)] * 3
                tgt[a] = slice(off, f.shape[a] - 2 + off)
                stencil[tuple(tgt)] += coef * gd
            grad += stencil
        else:
            a, b = axes
            stencil = np.zeros_like(f)
            for oa, ca in ((0, -1.0), (1, 1.0)):
                for ob, cb in ((0, -1.0), (1, 1.0)):
                    tgt = [slice(None)] * 3
                    tgt[a] = slice(oa, f.shape[a] - 1 + oa)
                    tgt[b] = slice(ob, f.shape[b] - 1 + ob)
                    stencil[tuple(tgt)] += ca * cb * gd
            grad += stencil
    return cost, grad


def spline_objective_3d(f: np.ndarray, counts: np.ndarray, lam: float):
    """Histogram NLL plus thin-plate smoothness, with gradient."""
    n = counts.sum()
    ls = logsumexp(-f)
    cost = float((f * counts).sum()) / n + ls
    grad = counts / n - np.exp(-f - ls)
    sc, sg = _thin_plate(f, lam)
    return cost + sc, grad + sg


def fit_spline_3d(counts: np.ndarray, lo, hi, lam: float,
                  return_trace: bool = False):
    """Penalized maximum-likelihood cost lattice over a 3D histogram."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 3:
        raise InvalidInputError("expected a 3D histogram")
    if counts.sum() <= 0:
        raise InvalidInputError("histogram is empty")
    if lam <= 0:
        raise InvalidInputError("need lam > 0")
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    shape = counts.shape
    trace = []

    def objective(vec):
        cost, grad = spline_objective_3d(vec.reshape(shape), counts, lam)
        return cost, grad.ravel()

    def record(vec):
        trace.append(objective(vec)[0])

    res = optimize.minimize(objective, np.zeros(counts.size), jac=True,
                            method="L-BFGS-B",
                            callback=record if return_trace else None,
                            options={"maxiter": 3000, "ftol": 1e-12,
                                     "gtol": 1e-10})
    f = res.x.reshape(shape)
    steps = (hi - lo) / (np.array(shape) - 1)
    f = f + np.log(np.exp(-f).sum() * np.prod(steps))
    prior = SplinePrior(grid=f, lo=lo, hi=hi)
    return (prior, trace) if return_trace else prior


# ---------------------------------------------------------------------------
# Illumination


def fit_light_gaussian(lights: np.ndarray, reg: float = 1e-6) -> LightGaussian:
    """Sample-moment Gaussian over flattened illumination vectors."""
    l = np.asarray(lights, dtype=np.float64)
    l = l.reshape(l.shape[0], -1)
    if l.shape[0] < 2:
        raise InvalidInputError("need at least two lights to fit a Gaussian")
    mu = l.mean(axis=0)
    c = l - mu
    cov = c.T @ c / l.shape[0]
    return LightGaussian(mu=mu, cov=cov, reg=reg)


# ---------------------------------------------------------------------------
# Hyperparameter tuning


TUNABLE_FIELDS = ("lambda_s", "lambda_e", "lambda_a", "lambda_k",
                  "lambda_i", "lambda_c", "lambda_l")
STEP_MULTIPLIERS = (4.0, 2.0, np.sqrt(2.0))


def tune_hyperparams(evaluate, initial: HyperParams,
                     fields=TUNABLE_FIELDS, max_sweeps: int = 10):
    """Coordinate descent over multiplicative steps on the objective weights.

    ``evaluate`` maps a HyperParams to the average error on the training
    objects; one coordinate moves at a time, trying each step size up and
    down, until a full sweep over the coordinates yields no improvement.
    """
    best = initial
    best_err = evaluate(best)
    history = [(best, best_err)]
    for _ in range(max_sweeps):
        improved = False
        for name in fields:
            value = getattr(best, name)
            if value == 0.0:
                continue  # a disabled term stays disabled
            for mult in STEP_MULTIPLIERS:
                for candidate in (value * mult, value / mult):
                    trial = replace(best, **{name: candidate})
                    err = evaluate(trial)
                    if err < best_err - 1e-12:
                        best, best_err = trial, err
                        history.append((best, best_err))
                        improved = True
        if not improved:
            break
    return best, best_err, history
