"""Differentiable rendering: depth -> normals -> spherical-harmonic log-shading.

The shading model is a quadratic form in the augmented surface normal
[n; 1], with 9 coefficients per channel. Log-shading is modeled directly, so
rendered shading exp(S) is positive without clamping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import H3X, H3Y, InvalidInputError, as_raster, convolve, correlate

# Constants of the quadratic-form SH irradiance evaluation.
C1 = 0.429043
C2 = 0.511664
C3 = 0.743125
C4 = 0.886227
C5 = 0.247708


@dataclass
class NormalField:
    """Per-pixel unit normals of a height field, plus the magnitude term.

    nx, ny, nz are the components of the unit normal; b is the
    normalization magnitude sqrt(1 + Zx^2 + Zy^2), cached for backprop.
    """

    nx: np.ndarray
    ny: np.ndarray
    nz: np.ndarray
    b: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.nx, self.ny, self.nz], axis=-1)


def linearize(z: np.ndarray) -> NormalField:
    """Convert a depth map into a unit surface-normal field.

    nx = Zx / b, ny = Zy / b, nz = 1 / b with b = sqrt(1 + Zx^2 + Zy^2);
    nz > 0 everywhere since depth maps are single-valued height fields.
    """
    z = as_raster(z, channels=1)
    zx = convolve(z, H3X)
    zy = convolve(z, H3Y)
    b = np.sqrt(1.0 + zx * zx + zy * zy)
    return NormalField(nx=zx / b, ny=zy / b, nz=1.0 / b, b=b)


def sh_matrix(light: np.ndarray) -> np.ndarray:
    """Build the symmetric 4x4 quadratic-form matrix for one 9-vector."""
    L = np.asarray(light, dtype=np.float64)
    if L.shape != (9,):
        raise InvalidInputError(f"per-channel light must have 9 coefficients, got {L.shape}")
    L1, L2, L3, L4, L5, L6, L7, L8, L9 = L
    return np.array([
        [C1 * L9, C1 * L5, C1 * L8, C2 * L4],
        [C1 * L5, -C1 * L9, C1 * L6, C2 * L2],
        [C1 * L8, C1 * L6, C3 * L7, C2 * L3],
        [C2 * L4, C2 * L2, C2 * L3, C4 * L1 - C5 * L7],
    ])


def _light_channels(light: np.ndarray) -> np.ndarray:
    L = np.asarray(light, dtype=np.float64)
    if L.ndim == 1 and L.size == 9:
        return L.reshape(1, 9)
    if L.ndim == 2 and L.shape[1] == 9 and L.shape[0] in (1, 3):
        return L
    if L.ndim == 1 and L.size == 27:
        return L.reshape(3, 9)
    raise InvalidInputError(f"light must be 9, 27, (1,9) or (3,9) values, got shape {L.shape}")


def sh_basis(n: NormalField) -> np.ndarray:
    """Rows of the Jacobian of log-shading with respect to the 9 coefficients.

    Shape (H, W, 9); S = basis @ L per channel.
    """
    nx, ny, nz = n.nx, n.ny, n.nz
    return np.stack([
        np.full_like(nx, C4),
        2.0 * C2 * ny,
        2.0 * C2 * nz,
        2.0 * C2 * nx,
        2.0 * C1 * nx * ny,
        2.0 * C1 * ny * nz,
        C3 * nz * nz - C5,
        2.0 * C1 * nx * nz,
        C1 * (nx * nx - ny * ny),
    ], axis=-1)


def render_logshading(n: NormalField, light: np.ndarray) -> np.ndarray:
    """Evaluate per-pixel log-shading [n;1]^T M [n;1] for each channel.

    Returns (H, W) for a single channel, (H, W, 3) for color. A color render
    is three independent grayscale renders sharing one linearization.
    """
    L = _light_channels(light)
    basis = sh_basis(n)
    out = np.einsum("hwk,ck->hwc", basis, L)
    return out[:, :, 0] if L.shape[0] == 1 else out


def _shading_channels(d_s: np.ndarray, nch: int) -> np.ndarray:
    d = np.asarray(d_s, dtype=np.float64)
    if d.ndim == 2:
        d = d[:, :, None]
    if d.shape[2] != nch:
        raise InvalidInputError("gradient channel count does not match light")
    return d


def normal_gradients(n: NormalField, light: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel gradient of log-shading with respect to (nx, ny, nz), per channel."""
    L = _light_channels(light)
    bx = np.zeros(n.nx.shape + (L.shape[0],))
    by = np.zeros_like(bx)
    bz = np.zeros_like(bx)
    for c in range(L.shape[0]):
        M = sh_matrix(L[c])
        # 2 * [n;1]^T M restricted to the first three columns.
        bx[:, :, c] = 2.0 * (M[0, 0] * n.nx + M[1, 0] * n.ny + M[2, 0] * n.nz + M[3, 0])
        by[:, :, c] = 2.0 * (M[0, 1] * n.nx + M[1, 1] * n.ny + M[2, 1] * n.nz + M[3, 1])
        bz[:, :, c] = 2.0 * (M[0, 2] * n.nx + M[1, 2] * n.ny + M[2, 2] * n.nz + M[3, 2])
    return bx, by, bz


def backprop_normals_to_depth(d_nx, d_ny, d_nz, n: NormalField) -> np.ndarray:
    """Chain gradients with respect to the unit normal components onto Z.

    Uses the analytic Jacobian of the normalization: dNx/dZx = (1 - Nx^2)Nz,
    dNx/dZy = dNy/dZx = -NxNyNz, dNy/dZy = (1 - Ny^2)Nz, dNz/dZx = -NxNz^2,
    dNz/dZy = -NyNz^2, followed by the adjoints of the derivative filters.
    """
    nx, ny, nz = n.nx, n.ny, n.nz
    f11 = (1.0 - nx * nx) * nz
    f22 = (1.0 - ny * ny) * nz
    f13 = -(nx * nz * nz)
    f23 = -(ny * nz * nz)
    f12 = -(nx * ny * nz)
    gx = d_nx * f11 + d_ny * f12 + d_nz * f13
    gy = d_nx * f12 + d_ny * f22 + d_nz * f23
    return correlate(gx, H3X) + correlate(gy, H3Y)


def backprop_to_depth(d_s: np.ndarray, n: NormalField, light: np.ndarray) -> np.ndarray:
    """Backpropagate a gradient with respect to log-shading onto the depth map."""
    L = _light_channels(light)
    d = _shading_channels(d_s, L.shape[0])
    bx, by, bz = normal_gradients(n, light)
    d_nx = (d * bx).sum(axis=2)
    d_ny = (d * by).sum(axis=2)
    d_nz = (d * bz).sum(axis=2)
    return backprop_normals_to_depth(d_nx, d_ny, d_nz, n)


def backprop_to_light(d_s: np.ndarray, n: NormalField) -> np.ndarray:
    """Backpropagate a log-shading gradient onto the light coefficients.

    Returns an array shaped like the per-channel light: (9,) for a
    single-channel gradient, (3, 9) for color.
    """
    d = np.asarray(d_s, dtype=np.float64)
    single = d.ndim == 2
    if single:
        d = d[:, :, None]
    basis = sh_basis(n)
    grad = np.einsum("hwc,hwk->ck", d, basis)
    return grad[0] if single else grad


def sphere_normals(diameter: int) -> tuple[NormalField, np.ndarray]:
    """Unit normals of a viewer-facing sphere on a diameter^2 grid, plus its mask."""
    if diameter < 8:
        raise InvalidInputError("sphere diameter must be >= 8")
    r = (diameter - 1) / 2.0
    y, x = np.mgrid[0:diameter, 0:diameter]
    u = (x - r) / r
    v = (r - y) / r  # +y up in world coordinates
    rr = u * u + v * v
    mask = rr <= 1.0
    nz = np.sqrt(np.clip(1.0 - rr, 0.0, None))
    n = NormalField(nx=np.where(mask, u, 0.0), ny=np.where(mask, v, 0.0),
                    nz=np.where(mask, nz, 1.0), b=np.ones_like(nz))
    return n, mask


def render_sphere(light: np.ndarray, diameter: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Render the SH illumination on a sphere; returns (log-shading, mask).

    Pixels outside the spherical mask are zero.
    """
    n, mask = sphere_normals(diameter)
    s = render_logshading(n, light)
    if s.ndim == 2:
        s = np.where(mask, s, 0.0)
    else:
        s = np.where(mask[:, :, None], s, 0.0)
    return s, mask
