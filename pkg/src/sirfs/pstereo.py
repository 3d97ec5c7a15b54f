"""Multi-image photometric stereo: alternating lights, normals, and depth.

Given several shading images of one object (each the exponentiated
log-intensity divided by reflectance), recover an integrable depth map and
one spherical-harmonic light per image by alternating three steps:

1. fix normals, fit each image's light by robust (absolute-error) regression;
2. fix lights, fit decoupled per-pixel normals by smooth-absolute descent;
3. project the normal field onto the nearest integrable surface.

Absolute error makes the fits robust to shadows and specularities, which the
Lambertian rendering model does not represent.
"""

from __future__ import annotations

import numpy as np
from scipy import optimize, sparse

from .grid import H3X, H3Y, InvalidInputError, as_raster, convolve, correlate
from .render import (
    NormalField,
    linearize,
    normal_gradients,
    render_logshading,
    sh_basis,
)

# Robust-regression settings: weight floor keeps the 1/|residual| reweighting
# bounded, and the smooth-absolute delta matches the loss-trace tolerance.
IRLS_WEIGHT_FLOOR = 1e-6
IRLS_ITERS = 20
ABS_DELTA = 1e-6
NZ_FLOOR = 0.01
ALTERNATIONS = 30
TIED_ALTERNATIONS = 10

# Basis columns active at each spherical-harmonic order cap: order 1 keeps
# the constant and linear terms (point light + ambient), order 2 keeps all 9.
_ORDER_COLUMNS = {1: np.arange(4), 2: np.arange(9)}


class DivergenceError(RuntimeError):
    """Raised when the alternation loss grows far beyond its initial value."""

    def __init__(self, message: str, losses: np.ndarray):
        super().__init__(message)
        self.losses = losses


def _smooth_abs(r: np.ndarray) -> np.ndarray:
    return np.sqrt(r * r + ABS_DELTA * ABS_DELTA)


def _irls_exp(A: np.ndarray, target: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """Minimize sum_i |exp(A x)_i - t_i| by reweighted Gauss-Newton steps.

    Each iteration linearizes the exponential around the current point and
    solves a least-squares problem weighted by 1/max(|residual|, floor),
    accepting the step only if it lowers the robust loss (with backtracking).
    """
    x = np.asarray(x0, dtype=np.float64).copy()

    def loss(v):
        return np.sum(np.abs(np.exp(A @ v) - target))

    best = loss(x)
    for _ in range(IRLS_ITERS):
        e = np.exp(A @ x)
        r = e - target
        w = 1.0 / np.maximum(np.abs(r), IRLS_WEIGHT_FLOOR)
        sw = np.sqrt(w)
        J = sw[:, None] * (e[:, None] * A)
        rhs = sw * (target - e)
        step, *_ = np.linalg.lstsq(J, rhs, rcond=None)
        scale = 1.0
        improved = False
        for _ in range(12):
            cand = x + scale * step
            c = loss(cand)
            if c < best - 1e-15:
                x, best, improved = cand, c, True
                break
            scale *= 0.5
        if not improved:
            break
    return x


def fit_light_irls(shading, normals: NormalField, *, valid=None,
                   order: int = 2) -> np.ndarray:
    """Fit one 9-vector light to a shading image given fixed normals.

    Minimizes the absolute error between exp(log-shading) and the observed
    shading. ``order=1`` caps the light at constant-plus-linear coefficients
    (a point light plus ambient term); the remaining entries stay zero.
    """
    s = np.atleast_2d(as_raster(shading, channels=1).squeeze())
    if order not in _ORDER_COLUMNS:
        raise InvalidInputError(f"light order must be 1 or 2, got {order}")
    cols = _ORDER_COLUMNS[order]
    B = sh_basis(normals).reshape(-1, 9)
    t = s.ravel()
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        B, t = B[keep], t[keep]
    if t.size < 9:
        raise InvalidInputError(
            f"light fit needs at least 9 pixels, got {t.size}")
    A = B[:, cols]
    x0, *_ = np.linalg.lstsq(A, np.log(np.maximum(t, 1e-6)), rcond=None)
    x = _irls_exp(A, t, x0)
    light = np.zeros(9)
    light[cols] = x
    return light


def _normals_from_slopes(p: np.ndarray, q: np.ndarray) -> NormalField:
    b = np.sqrt(1.0 + p * p + q * q)
    return NormalField(nx=p / b, ny=q / b, nz=1.0 / b, b=b)


def fit_normals(shadings, lights, *, init: NormalField | None = None,
                max_iters: int = 2000) -> NormalField:
    """Fit decoupled per-pixel unit normals to a stack of shading images.

    Each pixel's normal is parametrized by its slopes (p, q) with
    n = (p, q, 1)/sqrt(p^2 + q^2 + 1), which keeps nz > 0 (the visible
    hemisphere) without constraints. Integrability is not enforced here;
    use :func:`integrate_normals` to project onto a surface.
    """
    stack = [np.atleast_2d(as_raster(s, channels=1).squeeze()) for s in shadings]
    lights = [np.asarray(L, dtype=np.float64).reshape(9) for L in lights]
    if len(stack) != len(lights):
        raise InvalidInputError("need one light per shading image")
    if not stack:
        raise InvalidInputError("need at least one shading image")
    shape = stack[0].shape
    targets = np.stack([s.ravel() for s in stack])  # (J, N)

    if init is not None:
        nz = np.maximum(init.nz, NZ_FLOOR)
        p0, q0 = (init.nx / nz).ravel(), (init.ny / nz).ravel()
    else:
        p0 = np.zeros(targets.shape[1])
        q0 = np.zeros(targets.shape[1])

    def objective(x):
        p, q = np.split(x, 2)
        n = _normals_from_slopes(p[None, :], q[None, :])
        gp = np.zeros_like(p)
        gq = np.zeros_like(q)
        total = 0.0
        for t, L in zip(targets, lights):
            s_log = render_logshading(n, L)
            e = np.exp(s_log)
            r = e[0] - t
            total += np.sum(_smooth_abs(r))
            d_s = (r / _smooth_abs(r) * e[0])[None, :]
            bx, by, bz = normal_gradients(n, L)
            d_nx, d_ny, d_nz = bx[:, :, 0] * d_s, by[:, :, 0] * d_s, bz[:, :, 0] * d_s
            # Chain (nx, ny, nz) = (p, q, 1)/b onto the slopes.
            nx, ny, nz, b = n.nx[0], n.ny[0], n.nz[0], n.b[0]
            gp += (d_nx[0] * (1.0 - nx * nx) - d_ny[0] * nx * ny
                   - d_nz[0] * nx * nz) / b
            gq += (-d_nx[0] * nx * ny + d_ny[0] * (1.0 - ny * ny)
                   - d_nz[0] * ny * nz) / b
        return total, np.concatenate([gp, gq])

    result = optimize.minimize(
        objective, np.concatenate([p0, q0]), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iters, "maxcor": 10, "ftol": 1e-14,
                 "gtol": 1e-10})
    p, q = np.split(result.x, 2)
    n = _normals_from_slopes(p.reshape(shape), q.reshape(shape))
    return n


def integrate_normals(normals: NormalField, *, tol: float = 1e-10,
                      max_iters: int | None = None) -> np.ndarray:
    """Least-squares integrable surface for a (possibly non-integrable) field.

    Solves argmin_Z ||Z * hx - nx/nz||^2 + ||Z * hy - ny/nz||^2 by conjugate
    gradients on the normal equations, with nz clamped away from zero. The
    solution is defined up to a constant; the zero-mean representative is
    returned, and the objective's gradient at it has norm below ``tol``
    scaled by the target magnitude.
    """
    nz = np.maximum(normals.nz, NZ_FLOOR)
    gx = normals.nx / nz
    gy = normals.ny / nz
    h, w = gx.shape
    npix = h * w

    def matvec(v):
        z = v.reshape(h, w)
        out = (correlate(convolve(z, H3X), H3X)
               + correlate(convolve(z, H3Y), H3Y))
        # Rank-one term pins the constant nullspace to the zero-mean gauge.
        out += np.mean(z)
        return out.ravel()

    op = sparse.linalg.LinearOperator((npix, npix), matvec=matvec)
    b = (correlate(gx, H3X) + correlate(gy, H3Y)).ravel()
    rhs_scale = max(np.linalg.norm(b), 1.0)
    z0, info = sparse.linalg.cg(
        op, b, rtol=0.0, atol=tol * rhs_scale,
        maxiter=max_iters if max_iters is not None else 50 * npix)
    if info != 0:
        raise RuntimeError(f"conjugate gradients did not converge (info={info})")
    z = z0.reshape(h, w)
    return z - np.mean(z)


def _stack_loss(z: np.ndarray, lights, targets) -> float:
    n = linearize(z)
    total = 0.0
    for L, t in zip(lights, targets):
        total += np.sum(np.abs(np.exp(render_logshading(n, L)) - t))
    return total


def _fit_tied_lights(targets, normals: NormalField, free_lights) -> list:
    """Constrain lights to scaled/shifted copies: L_j = a_j*L + b_j*e_DC.

    The shared direction is the leading principal direction of the free
    fits' non-constant coefficients; the per-image scale and shift are then
    refit robustly (a 2-parameter instance of the same IRLS problem).
    """
    stacked = np.stack(free_lights)  # (J, 9)
    nondc = stacked[:, 1:]
    _, _, vt = np.linalg.svd(nondc, full_matrices=False)
    shared = np.zeros(9)
    shared[1:] = vt[0]
    B = sh_basis(normals).reshape(-1, 9)
    A = np.stack([B @ shared, B[:, 0]], axis=1)  # columns: scale, DC shift
    tied = []
    for t, L in zip(targets, free_lights):
        x0 = np.array([L[1:] @ vt[0], L[0]], dtype=np.float64)
        x = _irls_exp(A, t.ravel(), x0)
        tied.append(x[0] * shared + x[1] * np.eye(9)[0])
    return tied


def photometric_stereo(images, reflectance, *, alternations: int = ALTERNATIONS,
                       tied: int = TIED_ALTERNATIONS, order: int = 2,
                       normal_iters: int = 200):
    """Recover a depth map and per-image lights from a multi-light stack.

    ``images`` are log-intensity rasters of one object under varying light;
    ``reflectance`` is the shared log-reflectance. Each shading target is
    exp(I_j - R). Runs ``alternations`` rounds of light fit, normal fit, and
    integration, constraining lights to scaled/shifted copies of a shared
    light for the first ``tied`` rounds. Color inputs should be split into
    channels by the caller; each channel is an independent image.

    Returns ``(z, lights, losses)`` where ``losses`` holds the robust
    rendering loss after each alternation. Raises :class:`DivergenceError`
    if the loss exceeds 10x its initial value.
    """
    r = np.atleast_2d(as_raster(reflectance, channels=1).squeeze())
    stack = [np.atleast_2d(as_raster(im, channels=1).squeeze()) for im in images]
    if len(stack) < 2:
        raise InvalidInputError("photometric stereo needs at least 2 images")
    for im in stack:
        if im.shape != r.shape:
            raise InvalidInputError("image and reflectance shapes differ")
    targets = [np.exp(im - r) for im in stack]

    z = np.zeros(r.shape)
    lights = [np.zeros(9) for _ in targets]
    losses = []
    initial = None
    for k in range(alternations):
        n = linearize(z)
        lights = [fit_light_irls(t, n, order=order) for t in targets]
        if k < tied:
            lights = _fit_tied_lights(targets, n, lights)
        n_free = fit_normals(targets, lights, init=n, max_iters=normal_iters)
        z = integrate_normals(n_free)
        loss = _stack_loss(z, lights, targets)
        losses.append(loss)
        if initial is None:
            initial = loss
        elif initial > 0 and loss > 10.0 * initial:
            raise DivergenceError(
                f"loss {loss:.3g} exceeded 10x initial {initial:.3g}",
                np.array(losses))
    return z, lights, np.array(losses)
