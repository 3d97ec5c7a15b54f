import numpy as np
import pytest

from sirfs import grid
from sirfs.grid import (H3X, H3XY, H3Y, InvalidInputError, Mask, Pyramid,
                        convolve, correlate)

rng = np.random.default_rng(0)


def brute_convolve(img, k):
    """Dense nested-loop convolution with replicate padding."""
    h, w = img.shape
    ry, rx = k.shape[0] // 2, k.shape[1] // 2
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(k.shape[0]):
                for b in range(k.shape[1]):
                    ii = min(max(i - (a - ry), 0), h - 1)
                    jj = min(max(j - (b - rx), 0), w - 1)
                    acc += k[a, b] * img[ii, jj]
            out[i, j] = acc
    return out


def test_convolve_constant_zero():
    img = np.full((10, 10), 3.7)
    assert np.allclose(convolve(img, H3X), 0.0, atol=1e-14)


def test_convolve_ramp():
    x = np.tile(np.arange(12.0), (9, 1))
    out = convolve(x, H3X)
    # 1/8-normalized Sobel on Z(x,y)=x gives a constant +1 in the interior
    # (convolution flips the taps).
    assert np.allclose(out[1:-1, 1:-1], 1.0)


def test_convolve_matches_bruteforce():
    img = rng.standard_normal((8, 8))
    for k in (H3X, H3XY):
        assert np.allclose(convolve(img, k), brute_convolve(img, k), atol=1e-13)


def test_convolve_rejects_bad_inputs():
    with pytest.raises(InvalidInputError):
        convolve(np.zeros((4, 4)), np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        convolve(np.full((4, 4), np.nan), H3X)


def test_adjoint_identity():
    a = rng.standard_normal((16, 16))
    b = rng.standard_normal((16, 16))
    for k in (H3X, H3Y, H3XY):
        lhs = np.vdot(convolve(a, k), b)
        rhs = np.vdot(a, correlate(b, k))
        assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


def test_correlate_point_symmetric_kernel_interior():
    # h3xy equals its own flip, so away from the padded border correlation
    # and convolution coincide.
    img = rng.standard_normal((10, 10))
    c = convolve(img, H3XY)
    r = correlate(img, H3XY)
    assert np.allclose(c[2:-2, 2:-2], r[2:-2, 2:-2], atol=1e-13)


def test_correlate_delta_gives_flipped_kernel():
    img = np.zeros((9, 9))
    img[4, 4] = 1.0
    out = correlate(img, H3X)
    assert np.allclose(out[3:6, 3:6], H3X[::-1, ::-1])


def test_gaussian_blur_adjoint():
    a = rng.standard_normal((17, 13))
    b = rng.standard_normal((17, 13))
    lhs = np.vdot(grid.gaussian_blur(a, 2.5), b)
    rhs = np.vdot(a, grid.gaussian_blur_adjoint(b, 2.5))
    assert abs(lhs - rhs) < 1e-10 * abs(lhs)


# ---------------------------------------------------------------------------
# Mask


def test_mask_keeps_largest_component():
    m = np.zeros((10, 10), bool)
    m[1:5, 1:5] = True
    m[7:9, 7:9] = True
    mask = Mask(m)
    assert mask.inside.sum() == 16
    assert mask.inside[2, 2] and not mask.inside[7, 7]


def test_mask_rejects_empty():
    with pytest.raises(InvalidInputError):
        Mask(np.zeros((5, 5), bool))


def test_mask_boundary_and_interior():
    m = np.zeros((8, 8), bool)
    m[2:6, 2:6] = True
    mask = Mask(m)
    assert mask.interior().sum() == 4
    assert mask.boundary().sum() == 12


# ---------------------------------------------------------------------------
# Pyramid


def test_pyramid_filter_taps():
    assert np.allclose(grid.PYRAMID_FILTER, np.array([1, 3, 3, 1]) / np.sqrt(8.0))
    assert np.isclose(grid.PYRAMID_FILTER.sum(), 2.0 * np.sqrt(2.0))


def test_pyramid_level_shapes():
    p = Pyramid((37, 64))
    for (h0, w0), (h1, w1) in zip(p.level_shapes, p.level_shapes[1:]):
        assert h1 == (h0 + 1) // 2 and w1 == (w0 + 1) // 2
    assert min(p.level_shapes[-1]) <= 16


def test_pyramid_zero_and_identity_paths():
    p = Pyramid((20, 20), min_size=4)
    assert np.allclose(p.synthesize(p.zeros()), 0.0)
    levels = p.zeros()
    levels[0] = rng.standard_normal(p.level_shapes[0])
    assert np.allclose(p.synthesize(levels), levels[0])


def test_pyramid_synthesize_matches_explicit_matrix():
    # Build G explicitly column by column on a tiny grid and compare G^T Y.
    p = Pyramid((16, 16), min_size=4)
    n = 16 * 16
    G = np.zeros((p.n_coeffs, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        G[:, j] = p.flatten(p.analyze(e.reshape(16, 16)))
    y = rng.standard_normal(p.n_coeffs)
    direct = (G.T @ y).reshape(16, 16)
    assert np.allclose(p.synthesize(p.unflatten(y)), direct, atol=1e-12)


def test_pyramid_adjoint_identity():
    p = Pyramid((19, 23), min_size=4)
    y = [rng.standard_normal(s) for s in p.level_shapes]
    g = rng.standard_normal((19, 23))
    lhs = np.vdot(p.synthesize(y), g)
    rhs = sum(np.vdot(a, b) for a, b in zip(y, p.analyze(g)))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_pyramid_gram_psd():
    p = Pyramid((12, 12), min_size=4)
    for _ in range(5):
        x = [rng.standard_normal(s) for s in p.level_shapes]
        gx = p.analyze(p.synthesize(x))
        q = sum(np.vdot(a, b) for a, b in zip(x, gx))
        assert q >= -1e-10


def test_pyramid_backprop_zero_and_single_level():
    p = Pyramid((10, 10), min_size=16)  # single level
    assert p.n_levels == 1
    g = rng.standard_normal((10, 10))
    out = p.analyze(g)
    assert len(out) == 1 and np.allclose(out[0], g)
    assert all(np.allclose(lv, 0) for lv in p.analyze(np.zeros((10, 10))))


def test_pyramid_size_mismatch():
    p = Pyramid((10, 10), min_size=4)
    with pytest.raises(InvalidInputError):
        p.analyze(np.zeros((9, 10)))
    bad = p.zeros()
    bad[1] = np.zeros((3, 3))
    with pytest.raises(InvalidInputError):
        p.synthesize(bad)


def test_pyramid_1d_adjoint():
    sizes, analyze, synthesize = grid.pyramid_1d(64, min_size=8)
    y = [rng.standard_normal(s) for s in sizes]
    g = rng.standard_normal(64)
    lhs = synthesize(y) @ g
    rhs = sum(a @ b for a, b in zip(y, analyze(g)))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))
