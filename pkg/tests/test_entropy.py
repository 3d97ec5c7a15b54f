import time

import numpy as np
import pytest

from sirfs import entropy
from sirfs.entropy import (entropy_1d, entropy_3d, naive_entropy_1d,
                           naive_entropy_3d, splat, splat3)
from sirfs.grid import InvalidInputError

rng = np.random.default_rng(3)


def test_splat_anchor_offset():
    h = splat(np.array([0.0, 0.0, 0.0]), sigma=1.0)
    assert np.allclose(h.bins.sum(), 3.0)
    # The smallest sample is anchored at a fixed fractional offset inside its
    # bin, so identical samples split deterministically across two bins.
    assert np.allclose(h.frac, entropy._ANCHOR_FRAC)
    assert np.isclose(h.bins.max(), 3.0 * (1.0 - entropy._ANCHOR_FRAC))


def test_splat_midpoint_split():
    h0 = splat(np.array([0.0]), sigma=1.0)
    w = h0.width
    # A second sample half a bin above the first one's fencepost splits 0.5/0.5.
    h = splat(np.array([0.0, 0.0 + 123 * 0]), 1.0)  # geometry anchor
    x = h0.lo[0] + (h0.base[0] + 0.5) * w
    h2 = splat(np.array([0.0, x]), 1.0)
    frac = h2.frac[1]
    assert np.isclose(frac, 0.5, atol=1e-9)


def test_splat_mass_conservation():
    x = rng.standard_normal(1000)
    h = splat(x, 0.3)
    assert abs(h.bins.sum() - 1000.0) < 1e-9
    h3 = splat3(rng.standard_normal((500, 3)), 0.3)
    assert abs(h3.bins.sum() - 500.0) < 1e-9


def test_splat_empty_rejected():
    with pytest.raises(InvalidInputError):
        splat(np.array([]), 1.0)
    with pytest.raises(InvalidInputError):
        splat(np.array([1.0]), -1.0)


def test_identical_samples_value():
    sigma = 0.7
    r = entropy_1d(np.full(50, 1.234), sigma)
    assert abs(r.value - 0.5 * np.log(4 * np.pi * sigma**2)) < 1e-6


def test_two_sample_matches_naive():
    sigma = 0.5
    for d in (0.1, 0.5, 1.3):
        x = np.array([0.0, d])
        r = entropy_1d(x, sigma)
        expected = -np.log((2 + 2 * np.exp(-d**2 / (4 * sigma**2)))
                           / (4 * np.sqrt(4 * np.pi * sigma**2)))
        # A single pair probes the discretized kernel pointwise, the worst
        # case for the histogram approximation; random sets average it out.
        assert abs(r.value - expected) < 1e-3 * abs(expected)
        assert abs(r.value - naive_entropy_1d(x, sigma)) < 1e-3 * abs(expected)


@pytest.mark.parametrize("seed", [10, 11, 12])
def test_accuracy_vs_naive_1d(seed):
    r = np.random.default_rng(seed)
    x = r.uniform(0, 3, size=10_000)
    approx = entropy_1d(x, 0.25).value
    exact = naive_entropy_1d(x, 0.25)
    assert abs(approx - exact) < 1e-4 * abs(exact)  # within 0.01%


def test_identical_samples_3d():
    sigma = 0.4
    x = np.tile(np.array([0.3, -0.2, 1.0]), (30, 1))
    r = entropy_3d(x, sigma)
    assert abs(r.value - 1.5 * np.log(4 * np.pi * sigma**2)) < 1e-5
    assert abs(r.value - naive_entropy_3d(x, sigma)) < 1e-5


def test_two_cluster_3d_vs_naive():
    r = np.random.default_rng(20)
    a = r.normal(0, 0.08, size=(500, 3))
    b = r.normal(0, 0.08, size=(500, 3)) + np.array([1.0, 0, 0])
    x = np.vstack([a, b])
    approx = entropy_3d(x, 0.1).value
    exact = naive_entropy_3d(x, 0.1)
    assert abs(approx - exact) < 5e-4 * abs(exact)  # within 0.05%


def test_gradient_finite_difference_1d():
    x = rng.uniform(0, 2, size=60)
    g = entropy_1d(x, 0.3).grad_samples
    eps = 1e-7
    for i in rng.integers(0, 60, size=10):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        # Freeze the histogram range so the finite difference probes only
        # the splat weights (range endpoints are treated as constants).
        fd = (_entropy_fixed_range(xp, x, 0.3) - _entropy_fixed_range(xm, x, 0.3)) / (2 * eps)
        assert abs(g[i] - fd) < 1e-4 * max(1.0, abs(fd))


def _entropy_fixed_range(x, x_range, sigma):
    h_ref = splat(x_range, sigma)
    t = (np.asarray(x) - h_ref.lo[0]) / h_ref.width
    base = np.floor(t).astype(np.intp)
    frac = t - base
    bins = np.zeros_like(h_ref.bins)
    np.add.at(bins, base, 1.0 - frac)
    np.add.at(bins, base + 1, frac)
    h = entropy.SoftHistogram(bins=bins, lo=h_ref.lo, width=h_ref.width,
                              base=base, frac=frac)
    return entropy.quadratic_entropy(h, sigma, x.size).value


def test_gradient_finite_difference_3d():
    x = rng.uniform(0, 1.5, size=(40, 3))
    g = entropy_3d(x, 0.3).grad_samples
    h_ref = splat3(x, 0.3)
    eps = 1e-7
    for i in rng.integers(0, 40, size=5):
        for d in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i, d] += eps
            xm[i, d] -= eps
            fd = (_entropy3_fixed(xp, h_ref, 0.3) - _entropy3_fixed(xm, h_ref, 0.3)) / (2 * eps)
            assert abs(g[i, d] - fd) < 1e-4 * max(1.0, abs(fd))


def _entropy3_fixed(x, h_ref, sigma):
    t = (np.asarray(x) - h_ref.lo) / h_ref.width
    base = np.floor(t).astype(np.intp)
    frac = t - base
    bins = np.zeros_like(h_ref.bins)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                w = ((frac[:, 0] if dz else 1 - frac[:, 0])
                     * (frac[:, 1] if dy else 1 - frac[:, 1])
                     * (frac[:, 2] if dx else 1 - frac[:, 2]))
                np.add.at(bins, (base[:, 0] + dz, base[:, 1] + dy, base[:, 2] + dx), w)
    h = entropy.SoftHistogram(bins=bins, lo=h_ref.lo, width=h_ref.width,
                              base=base, frac=frac)
    return entropy.quadratic_entropy_3d(h, sigma, x.shape[0]).value


def test_translation_invariance():
    x = rng.uniform(0, 2, size=200)
    v1 = entropy_1d(x, 0.3).value
    v2 = entropy_1d(x + 57.0, 0.3).value
    assert abs(v1 - v2) < 1e-9


def test_gradient_nearly_sums_to_zero():
    # The continuous entropy depends only on pairwise differences, so its
    # gradient sums to zero; the histogram discretization (with the range
    # anchored to the data minimum) leaves only a small residual drift.
    x = rng.uniform(0, 2, size=500)
    g = entropy_1d(x, 0.3).grad_samples
    assert abs(g.sum()) < 1e-2 * np.abs(g).sum()


def test_linear_time_scaling():
    x1 = rng.uniform(0, 3, size=100_000)
    x2 = rng.uniform(0, 3, size=200_000)
    entropy_1d(x1, 0.25)  # warm-up
    t0 = time.perf_counter()
    for _ in range(3):
        entropy_1d(x1, 0.25)
    t1 = time.perf_counter()
    for _ in range(3):
        entropy_1d(x2, 0.25)
    t2 = time.perf_counter()
    assert (t2 - t1) <= 2.5 * (t1 - t0) + 0.05
