"""Evaluation metrics: shape, normal, illumination, shading and reflectance
errors, plus their geometric-mean summary.

Shading and reflectance are compared in linear intensity; shape error is
shift-invariant, intensity errors are scale-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import InvalidInputError
from .render import render_sphere

EPS_FLOOR = 1e-12
WINDOW = 20
WINDOW_STEP = 10


@dataclass
class MetricReport:
    z_mae: float
    n_mae: float
    s_mse: float
    r_mse: float
    rs_mse: float
    l_mse: float
    average: float = 0.0

    FIELDS = ("z_mae", "n_mae", "s_mse", "r_mse", "rs_mse", "l_mse")

    def __post_init__(self):
        if self.average == 0.0:
            vals = np.maximum([getattr(self, f) for f in self.FIELDS], EPS_FLOOR)
            self.average = float(np.exp(np.mean(np.log(vals))))

    def to_dict(self) -> dict:
        d = {f: float(getattr(self, f)) for f in self.FIELDS}
        d["average"] = float(self.average)
        return d


def scale_invariant_mse(x_hat: np.ndarray, x_star: np.ndarray) -> float:
    """(1/n) min_a ||a*x_hat - x_star||^2 with the closed-form multiplier."""
    xh = np.asarray(x_hat, dtype=np.float64).ravel()
    xs = np.asarray(x_star, dtype=np.float64).ravel()
    if xh.size != xs.size:
        raise InvalidInputError("size mismatch")
    denom = xh @ xh
    if denom == 0.0:
        return float(xs @ xs) / xs.size  # the multiplier is irrelevant
    alpha = (xh @ xs) / denom
    r = alpha * xh - xs
    return float(r @ r) / xs.size


def z_mae(z_hat: np.ndarray, z_star: np.ndarray,
          valid: np.ndarray | None = None) -> float:
    """Shift-invariant mean absolute depth error (optimal shift = median)."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z_star = np.asarray(z_star, dtype=np.float64)
    if z_hat.shape != z_star.shape:
        raise InvalidInputError("size mismatch")
    if valid is not None:
        d = z_hat[valid] - z_star[valid]
    else:
        d = (z_hat - z_star).ravel()
    if d.size == 0:
        raise InvalidInputError("no valid pixels")
    return float(np.abs(d - np.median(d)).mean())


def n_mae(n_hat: np.ndarray, n_star: np.ndarray,
          valid: np.ndarray | None = None) -> float:
    """Mean angle in radians between two unit-normal fields."""
    n_hat = np.asarray(n_hat, dtype=np.float64)
    n_star = np.asarray(n_star, dtype=np.float64)
    if n_hat.shape != n_star.shape or n_hat.shape[-1] != 3:
        raise InvalidInputError("expected matching (..., 3) normal fields")
    for n in (n_hat, n_star):
        lens = np.linalg.norm(n, axis=-1)
        sel = lens[valid] if valid is not None else lens.ravel()
        if not np.allclose(sel, 1.0, atol=1e-6):
            raise InvalidInputError("normals must be unit length")
    dots = (n_hat * n_star).sum(axis=-1)
    if valid is not None:
        dots = dots[valid]
    return float(np.arccos(np.clip(dots, -1.0, 1.0)).mean())


def l_mse(light_hat: np.ndarray, light_star: np.ndarray,
          diameter: int = 64) -> float:
    """Scale-invariant MSE between sphere renderings of two illuminations.

    One multiplier covers all channels jointly, so relative channel (color)
    errors are penalized while overall brightness is not.
    """
    s_hat, mask = render_sphere(light_hat, diameter)
    s_star, _ = render_sphere(light_star, diameter)
    if s_hat.ndim == 2:
        s_hat = s_hat[..., None]
    if s_star.ndim == 2:
        s_star = s_star[..., None]
    if s_hat.shape[-1] != s_star.shape[-1]:
        raise InvalidInputError("channel count mismatch between lights")
    return scale_invariant_mse(s_hat[mask], s_star[mask])


def _windows(valid: np.ndarray):
    """20x20 windows stepped by 10 tiling the mask bounding box."""
    ys, xs = np.nonzero(valid)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    if y1 - y0 < WINDOW or x1 - x0 < WINDOW:
        return [(slice(y0, y1), slice(x0, x1))]
    outs = []
    y_starts = list(range(y0, y1 - WINDOW + 1, WINDOW_STEP))
    if y_starts[-1] != y1 - WINDOW:
        y_starts.append(y1 - WINDOW)
    x_starts = list(range(x0, x1 - WINDOW + 1, WINDOW_STEP))
    if x_starts[-1] != x1 - WINDOW:
        x_starts.append(x1 - WINDOW)
    for yy in y_starts:
        for xx in x_starts:
            outs.append((slice(yy, yy + WINDOW), slice(xx, xx + WINDOW)))
    return outs


def _local_error(x_hat: np.ndarray, x_star: np.ndarray, valid: np.ndarray,
                 wins) -> tuple[float, float]:
    """Summed windowed scale-invariant error and the prediction's own energy."""
    err = 0.0
    energy = 0.0
    for sy, sx in wins:
        m = valid[sy, sx]
        if not m.any():
            continue
        xh = x_hat[sy, sx][m]
        xs = x_star[sy, sx][m]
        d = xh @ xh
        if d > 0:
            a = (xh @ xs) / d
            r = a * xh - xs
            err += float(r @ r)
        else:
            err += float(xs @ xs)
        energy += float(d)
    return err, energy


def rs_mse(s_hat, r_hat, s_star, r_star, valid: np.ndarray) -> float:
    """Locally scale-invariant shading/reflectance error, per channel.

    Each term is normalized by the prediction's own windowed energy; an
    all-zero prediction scores the documented maximum of one.
    """
    wins = _windows(valid)

    def channels(img):
        img = np.asarray(img, dtype=np.float64)
        return img[..., None] if img.ndim == 2 else img

    def term(x_hat, x_star):
        x_hat, x_star = channels(x_hat), channels(x_star)
        scores = []
        for c in range(x_hat.shape[-1]):
            err, energy = _local_error(x_hat[..., c], x_star[..., c], valid, wins)
            scores.append(err / energy if energy > 0 else 1.0)
        return float(np.mean(scores))

    return 0.5 * (term(s_hat, s_star) + term(r_hat, r_star))


def summarize(reports: list[MetricReport]) -> MetricReport:
    """Per-metric geometric mean over images, then the six-way average."""
    if not reports:
        raise InvalidInputError("need at least one report")
    out = {}
    for f in MetricReport.FIELDS:
        vals = np.maximum([getattr(r, f) for r in reports], EPS_FLOOR)
        out[f] = float(np.exp(np.mean(np.log(vals))))
    return MetricReport(**out)
