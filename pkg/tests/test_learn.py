import numpy as np
import pytest
from scipy.special import logsumexp

from sirfs.grid import InvalidInputError
from sirfs.learn import (fit_gsm_multivariate, fit_gsm_univariate,
                         fit_light_gaussian, fit_spline_1d, fit_spline_3d,
                         fit_whitening, spline_objective_3d, tune_hyperparams)
from sirfs.priors import HyperParams

rng = np.random.default_rng(11)


def _sample_gsm(n, alphas, sigmas, r):
    comp = r.choice(len(alphas), size=n, p=alphas)
    return r.standard_normal(n) * np.asarray(sigmas)[comp]


def _gsm_loglik(model, x):
    comp = (np.log(model.alphas) - 0.5 * np.log(2 * np.pi * model.sigmas**2)
            - x[:, None] ** 2 / (2 * model.sigmas**2))
    return logsumexp(comp, axis=1).mean()


def test_univariate_em_recovers_generator():
    alphas, sigmas = [0.7, 0.3], [0.2, 1.5]
    train = _sample_gsm(20_000, alphas, sigmas, np.random.default_rng(0))
    held = _sample_gsm(20_000, alphas, sigmas, np.random.default_rng(1))
    model, trace = fit_gsm_univariate(train, m=8, return_trace=True)
    comp = (np.log(alphas) - 0.5 * np.log(2 * np.pi * np.array(sigmas)**2)
            - held[:, None] ** 2 / (2 * np.array(sigmas)**2))
    gen_ll = logsumexp(comp, axis=1).mean()
    assert _gsm_loglik(model, held) >= gen_ll - 0.01
    assert np.all(np.diff(trace) >= -1e-10)  # EM monotonicity


def test_univariate_em_symmetric_data():
    x = rng.standard_normal(3000)
    m1 = fit_gsm_univariate(np.concatenate([x, -x]), m=6)
    m2 = fit_gsm_univariate(np.concatenate([np.abs(x), -np.abs(x)]), m=6)
    assert np.allclose(m1.sigmas, m2.sigmas, rtol=1e-6)
    assert np.allclose(m1.alphas, m2.alphas, rtol=1e-6)


def test_univariate_em_degenerate_floor():
    model = fit_gsm_univariate(np.zeros(1000), m=4)
    assert np.all(model.sigmas >= 1e-4)


def test_univariate_em_rejects_tiny_sets():
    with pytest.raises(InvalidInputError):
        fit_gsm_univariate(np.ones(50), m=40)


def test_multivariate_em_isotropic_covariance():
    r = np.random.default_rng(2)
    x = r.standard_normal((20_000, 3))
    x[: 10_000] *= 3.0  # two radial scales, isotropic shape
    model, trace = fit_gsm_multivariate(x, m=6, return_trace=True)
    vals = np.linalg.eigvalsh(model.covariance)
    assert vals[-1] / vals[0] < 1.05
    assert np.all(np.diff(trace) >= -1e-10)


def test_multivariate_em_beats_single_gaussian():
    r = np.random.default_rng(3)
    x = r.standard_normal((5000, 3))
    x[:2500] *= 4.0
    model = fit_gsm_multivariate(x, m=6)
    mix_ll = -model.cost(x)[0] / x.shape[0]
    cov = x.T @ x / x.shape[0]
    gauss_ll = (-0.5 * ((x @ np.linalg.inv(cov)) * x).sum(axis=1)
                - 0.5 * np.linalg.slogdet(2 * np.pi * cov)[1]).mean()
    assert mix_ll >= gauss_ll


def test_whitening_identity_covariance():
    r = np.random.default_rng(4)
    n = 4000
    x = r.standard_normal((n, 3))
    w = fit_whitening(x)
    # With the uncentered second moment X Xᵀ ≈ n·I the +1/2 power is √n·I.
    assert np.allclose(w.w, np.sqrt(n) * np.eye(3), atol=0.05 * np.sqrt(n))
    assert np.allclose(w.w, w.w.T)


def test_whitening_inverse_exponent_normalizes():
    r = np.random.default_rng(5)
    x = r.standard_normal((5000, 3)) * np.array([3.0, 1.0, 0.2])
    w = fit_whitening(x, exponent=-0.5)
    y = w.apply(x)
    assert np.allclose(y.T @ y, np.eye(3), atol=0.05)


def test_whitening_permutation_invariant():
    x = rng.standard_normal((100, 3))
    w1 = fit_whitening(x)
    w2 = fit_whitening(x[rng.permutation(100)])
    assert np.allclose(w1.w, w2.w, atol=1e-10)


def test_spline_1d_spike_and_normalization():
    counts = np.zeros(64)
    counts[20] = 500.0
    prior, trace = fit_spline_1d(counts, lo=0.0, hi=1.0, lam=1e-4,
                                 return_trace=True)
    assert np.argmin(prior.grid) == 20
    step = 1.0 / 63
    assert abs(np.exp(-prior.grid).sum() * step - 1.0) < 1e-6
    assert np.all(np.diff(trace) <= 1e-10)


def test_spline_1d_large_lambda_is_affine():
    counts = rng.poisson(20.0, size=64).astype(float)
    prior = fit_spline_1d(counts, lo=0.0, hi=1.0, lam=1e4)
    d2 = np.diff(prior.grid, 2)
    assert np.max(np.abs(d2)) < 1e-3


def test_spline_1d_rejects_empty():
    with pytest.raises(InvalidInputError):
        fit_spline_1d(np.zeros(64), 0.0, 1.0, 1.0)


def test_spline_3d_objective_gradient_fd():
    shape = (5, 5, 5)
    counts = rng.poisson(3.0, size=shape).astype(float)
    f = rng.standard_normal(shape)
    _, grad = spline_objective_3d(f, counts, lam=0.7)
    eps = 1e-6
    for _ in range(12):
        i, j, k = rng.integers(0, 5, size=3)
        fp, fm = f.copy(), f.copy()
        fp[i, j, k] += eps
        fm[i, j, k] -= eps
        fd = (spline_objective_3d(fp, counts, 0.7)[0]
              - spline_objective_3d(fm, counts, 0.7)[0]) / (2 * eps)
        assert abs(grad[i, j, k] - fd) < 1e-5 * max(1.0, abs(fd))


def test_spline_3d_symmetry_and_density_ordering():
    shape = (9, 9, 9)
    g = np.indices(shape) - 4
    counts = np.exp(-(g**2).sum(axis=0) / 6.0) * 100
    prior = fit_spline_3d(counts, lo=[0, 0, 0], hi=[1, 1, 1], lam=0.01)
    f = prior.grid
    assert np.allclose(f, f[::-1, :, :], atol=1e-4)  # symmetric input, symmetric fit
    assert f[4, 4, 4] < f[0, 0, 0]  # dense center is cheaper than empty corner
    steps = (1.0 / (np.array(shape) - 1))
    assert abs(np.exp(-f).sum() * np.prod(steps) - 1.0) < 1e-6


def test_light_gaussian_moments():
    l1, l2 = rng.standard_normal(9), rng.standard_normal(9)
    p = fit_light_gaussian(np.stack([l1, l2]))
    assert np.allclose(p.mu, (l1 + l2) / 2)
    lights = rng.standard_normal((200, 9)) @ np.diag(np.linspace(0.2, 2.0, 9))
    p = fit_light_gaussian(lights)
    d = lights - p.mu
    m2 = ((d @ p.cov_inv) * d).sum(axis=1).mean()
    assert abs(m2 - 9.0) < 0.5
    y = p.whiten(lights[0])
    assert np.allclose(p.unwhiten(y), lights[0], atol=1e-10)
    with pytest.raises(InvalidInputError):
        fit_light_gaussian(lights[:1])


def test_tuning_descends_on_quadratic():
    target = {"lambda_s": 4.0, "lambda_e": 0.5}

    def evaluate(hp):
        return ((np.log(hp.lambda_s / target["lambda_s"])) ** 2
                + (np.log(hp.lambda_e / target["lambda_e"])) ** 2)

    best, err, history = tune_hyperparams(evaluate, HyperParams(),
                                          fields=("lambda_s", "lambda_e"))
    errs = [e for _, e in history]
    assert np.all(np.diff(errs) < 0)
    assert err < evaluate(HyperParams())
    assert abs(np.log(best.lambda_s / 4.0)) < np.log(np.sqrt(2.0)) + 1e-9


def test_tuning_fixed_point_returns_incumbent():
    calls = []

    def evaluate(hp):
        calls.append(hp)
        return 1.0  # flat landscape: nothing improves

    start = HyperParams(lambda_o=0.0)
    best, err, history = tune_hyperparams(evaluate, start)
    assert best == start and err == 1.0 and len(history) == 1
    # disabled terms are never perturbed
    assert all(hp.lambda_o == 0.0 for hp in calls)
