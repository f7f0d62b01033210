import numpy as np
import pytest

from flowsolve import (
    CondOTPath,
    CustomPath,
    Denoiser,
    GaussianMixture,
    RangeUnattainableError,
    SingularityError,
    VectorFieldModel,
    VPPath,
    denoiser_to_vf,
    gmm_denoiser,
    gmm_log_marginal,
    make_fd_vjp,
    retime,
    vf_coefficients,
    vf_to_denoiser,
)


def two_component_2d():
    return GaussianMixture(
        np.array([0.3, 0.7]),
        np.array([[1.0, 0.5], [-1.0, 1.5]]),
        np.array([[[0.5, 0.1], [0.1, 0.4]], [[0.9, -0.2], [-0.2, 0.6]]]),
        isotropic=False,
    )


def linear_denoiser(path, scale=1.0):
    """Denoiser x1_hat = scale * x with a matching analytic vjp."""
    return Denoiser(
        evaluator=lambda x, t: scale * np.asarray(x, dtype=float),
        vjp=lambda x, t, v: scale * np.asarray(v, dtype=float),
        native_path=path,
    )


# -----------------------------------------------------------------------
# Drift <-> denoiser conversions
# -----------------------------------------------------------------------


def test_drift_from_denoiser_cond_ot_values():
    path = CondOTPath()
    den = Denoiser(lambda x, t: np.array([0.8]), lambda x, t, v: np.zeros(1), path)
    vf = denoiser_to_vf(den, path)
    np.testing.assert_allclose(vf.evaluator(np.array([0.4]), 0.5), [0.8], rtol=1e-14)

    den2 = Denoiser(lambda x, t: np.array([1.0]), lambda x, t, v: np.zeros(1), path)
    vf2 = denoiser_to_vf(den2, path)
    np.testing.assert_allclose(vf2.evaluator(np.array([0.5]), 0.5), [1.0], rtol=1e-14)


def test_cond_ot_drift_matches_simplified_form():
    path = CondOTPath()
    rng = np.random.default_rng(0)
    den = gmm_denoiser(two_component_2d(), path)
    vf = denoiser_to_vf(den, path)
    for _ in range(50):
        t = rng.uniform(0.01, 0.99)
        x = rng.standard_normal(2)
        simplified = (den.evaluator(x, t) - x) / (1.0 - t)
        np.testing.assert_allclose(vf.evaluator(x, t), simplified, rtol=1e-12, atol=1e-12)


def test_vp_drift_two_independent_codings():
    # Second coding: with sigma^2 = 1 - alpha^2 the drift reduces to
    # (dalpha/sigma^2) * ((sigma^2 + alpha^2) * x1_hat - alpha * x).
    path = VPPath()
    rng = np.random.default_rng(1)
    den = gmm_denoiser(two_component_2d(), path)
    vf = denoiser_to_vf(den, path)
    for _ in range(50):
        t = rng.uniform(0.02, 0.98)
        x = rng.standard_normal(2)
        a, s, da, _, _ = path.schedule(t)
        x1_hat = den.evaluator(x, t)
        alt = (da / s**2) * ((s**2 + a**2) * x1_hat - a * x)
        np.testing.assert_allclose(vf.evaluator(x, t), alt, rtol=1e-12, atol=1e-12)


def test_denoiser_recovery_values():
    path = CondOTPath()
    vf = VectorFieldModel(lambda x, t: np.array([0.8]), path)
    den = vf_to_denoiser(vf, path)
    np.testing.assert_allclose(den.evaluator(np.array([0.4]), 0.5), [0.8], rtol=1e-14)


@pytest.mark.parametrize("path,tol", [(CondOTPath(), 1e-12), (VPPath(), 1e-10)])
def test_conversion_round_trip(path, tol):
    rng = np.random.default_rng(2)
    den = gmm_denoiser(two_component_2d(), path)
    back = vf_to_denoiser(denoiser_to_vf(den, path), path)
    for _ in range(100):
        t = rng.uniform(0.02, 0.98)
        x = rng.standard_normal(2)
        np.testing.assert_allclose(back.evaluator(x, t), den.evaluator(x, t), atol=tol)
        v = rng.standard_normal(2)
        np.testing.assert_allclose(back.vjp(x, t, v), den.vjp(x, t, v), atol=tol)


def test_conversion_singularities():
    path = CondOTPath()
    den = linear_denoiser(path)
    vf = denoiser_to_vf(den, path)
    with pytest.raises(SingularityError) as err:
        vf.evaluator(np.ones(2), 1.0)
    assert "t=1.0" in str(err.value)

    flat = CustomPath(
        alpha_fn=lambda t: 0.5,
        sigma_fn=lambda t: 0.5,
        dalpha_fn=lambda t: 0.0,
        dsigma_fn=lambda t: 0.0,
    )
    den2 = vf_to_denoiser(VectorFieldModel(lambda x, t: x, flat), flat)
    with pytest.raises(SingularityError):
        den2.evaluator(np.ones(2), 0.5)


# -----------------------------------------------------------------------
# Retiming
# -----------------------------------------------------------------------


def test_retime_identity_is_noop():
    path = CondOTPath()
    den = gmm_denoiser(two_component_2d(), path)
    same = retime(den, CondOTPath())
    rng = np.random.default_rng(3)
    for _ in range(10):
        t = rng.uniform(0.05, 0.95)
        x = rng.standard_normal(2)
        np.testing.assert_allclose(same.evaluator(x, t), den.evaluator(x, t), atol=1e-12)


def test_retimed_vp_matches_native_cond_ot():
    gmm = two_component_2d()
    vp, ot = VPPath(), CondOTPath()
    den_native = gmm_denoiser(gmm, ot)
    den_retimed = retime(gmm_denoiser(gmm, vp), ot)
    assert den_retimed.native_path == ot
    rng = np.random.default_rng(4)
    t_min = ot.inverse_snr(vp.snr(0.0)) + 1e-9
    for _ in range(100):
        t = rng.uniform(t_min, 0.98)
        x = rng.standard_normal(2)
        np.testing.assert_allclose(
            den_retimed.evaluator(x, t), den_native.evaluator(x, t), atol=1e-8
        )
        v = rng.standard_normal(2)
        np.testing.assert_allclose(den_retimed.vjp(x, t, v), den_native.vjp(x, t, v), atol=1e-8)


def test_retime_below_native_snr_floor():
    # The VP schedule never reaches SNR 0, so early conditional-OT times
    # have no matched native time.
    vp, ot = VPPath(), CondOTPath()
    den = retime(gmm_denoiser(GaussianMixture.standard_normal(2), vp), ot)
    with pytest.raises(RangeUnattainableError) as err:
        den.evaluator(np.zeros(2), 0.0)
    assert err.value.min_usable_t is not None
    assert 0.0 < err.value.min_usable_t < 0.05


# -----------------------------------------------------------------------
# Mixture denoiser
# -----------------------------------------------------------------------


def test_standard_normal_denoiser_closed_form():
    path = CondOTPath()
    den = gmm_denoiser(GaussianMixture.standard_normal(3), path)
    rng = np.random.default_rng(5)
    for t in (0.1, 0.5, 0.9):
        a, s, _, _, _ = path.schedule(t)
        x = rng.standard_normal(3)
        np.testing.assert_allclose(den.evaluator(x, t), a * x / (a**2 + s**2), rtol=1e-13)


def test_point_mass_prior_returns_mean():
    mu = np.array([[1.0, -2.0]])
    gmm = GaussianMixture(np.array([1.0]), mu, np.array([1e-12]), isotropic=True)
    den = gmm_denoiser(gmm, CondOTPath())
    out = den.evaluator(np.array([5.0, 5.0]), 0.5)
    np.testing.assert_allclose(out, mu[0], atol=1e-5)


def _importance_sample_denoiser(gmm, path, t, x_t, n, seed):
    """Brute-force posterior mean: prior proposal, likelihood weights."""
    rng = np.random.default_rng(seed)
    x1 = gmm.sample(n, rng)
    a, s, _, _, _ = path.schedule(t)
    logw = -0.5 * np.sum((x_t - a * x1) ** 2, axis=1) / s**2
    w = np.exp(logw - logw.max())
    w /= w.sum()
    est = w @ x1
    var = np.sum(w[:, None] * (x1 - est) ** 2, axis=0)
    ess = 1.0 / np.sum(w**2)
    return est, np.sqrt(var / ess)


def test_mixture_denoiser_against_importance_sampling():
    gmm = two_component_2d()
    path = CondOTPath()
    den = gmm_denoiser(gmm, path)
    rng = np.random.default_rng(6)
    for trial in range(10):
        t = rng.uniform(0.2, 0.8)
        x_t = path.sample_xt(gmm.sample(1, rng)[0], t, rng)
        closed = den.evaluator(x_t, t)
        est, se = _importance_sample_denoiser(gmm, path, t, x_t, 1_000_000, seed=100 + trial)
        assert np.all(np.abs(closed - est) <= 3 * se + 1e-12)


def test_isotropic_and_full_covariance_agree():
    weights = np.array([0.4, 0.6])
    means = np.array([[0.5, -1.0, 0.0], [1.5, 2.0, -0.5]])
    scales = np.array([0.7, 1.3])
    iso = GaussianMixture(weights, means, scales, isotropic=True)
    full = GaussianMixture(
        weights, means, scales[:, None, None] * np.eye(3), isotropic=False
    )
    path = VPPath()
    den_iso, den_full = gmm_denoiser(iso, path), gmm_denoiser(full, path)
    rng = np.random.default_rng(7)
    for _ in range(20):
        t = rng.uniform(0.05, 0.95)
        x = rng.standard_normal(3)
        v = rng.standard_normal(3)
        np.testing.assert_allclose(den_iso.evaluator(x, t), den_full.evaluator(x, t), atol=1e-12)
        np.testing.assert_allclose(den_iso.vjp(x, t, v), den_full.vjp(x, t, v), atol=1e-12)
        np.testing.assert_allclose(
            gmm_log_marginal(iso, path, t, x), gmm_log_marginal(full, path, t, x), atol=1e-12
        )


@pytest.mark.parametrize("dim", [1, 2, 8])
def test_vjp_matches_finite_differences(dim):
    rng = np.random.default_rng(8)
    gmm = GaussianMixture(
        np.array([0.5, 0.5]),
        rng.standard_normal((2, dim)),
        np.abs(rng.standard_normal(2)) + 0.4,
        isotropic=True,
    )
    den = gmm_denoiser(gmm, CondOTPath())
    for _ in range(20):
        t = rng.uniform(0.05, 0.95)
        x = rng.standard_normal(dim)
        v = rng.standard_normal(dim)
        analytic = den.vjp(x, t, v)
        h = 1e-5 * (1.0 + np.max(np.abs(x)))
        fd = np.zeros(dim)
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = h
            fd[j] = v @ (den.evaluator(x + e, t) - den.evaluator(x - e, t)) / (2 * h)
        denom = max(1.0, np.max(np.abs(fd)))
        assert np.max(np.abs(analytic - fd)) / denom <= 1e-5


def test_vjp_full_covariance_finite_differences():
    gmm = two_component_2d()
    den = gmm_denoiser(gmm, VPPath())
    rng = np.random.default_rng(9)
    for _ in range(20):
        t = rng.uniform(0.05, 0.95)
        x = rng.standard_normal(2)
        v = rng.standard_normal(2)
        analytic = den.vjp(x, t, v)
        h = 1e-5 * (1.0 + np.max(np.abs(x)))
        fd = np.zeros(2)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd[j] = v @ (den.evaluator(x + e, t) - den.evaluator(x - e, t)) / (2 * h)
        assert np.max(np.abs(analytic - fd)) / max(1.0, np.max(np.abs(fd))) <= 1e-5


def test_fd_vjp_fallback_close_to_analytic():
    den = gmm_denoiser(two_component_2d(), CondOTPath())
    fallback = make_fd_vjp(den.evaluator)
    rng = np.random.default_rng(10)
    for _ in range(10):
        t = rng.uniform(0.1, 0.9)
        x = rng.standard_normal(2)
        v = rng.standard_normal(2)
        np.testing.assert_allclose(fallback(x, t, v), den.vjp(x, t, v), atol=1e-4)


# -----------------------------------------------------------------------
# Mixture marginal density
# -----------------------------------------------------------------------


def test_log_marginal_single_gaussian():
    path = CondOTPath()
    gmm = GaussianMixture.standard_normal(2)
    t = 0.3
    a, s, _, _, _ = path.schedule(t)
    var = a**2 + s**2
    x = np.array([0.5, -1.0])
    expected = -0.5 * (2 * np.log(2 * np.pi * var) + x @ x / var)
    assert gmm_log_marginal(gmm, path, t, x) == pytest.approx(expected, rel=1e-12)


def test_log_marginal_normalizes_on_grid():
    gmm = GaussianMixture(
        np.array([0.6, 0.4]), np.array([[-1.0], [2.0]]), np.array([0.3, 0.5]), isotropic=True
    )
    path = CondOTPath()
    grid = np.linspace(-12.0, 14.0, 4001)[:, None]
    dens = np.exp([gmm_log_marginal(gmm, path, 0.55, g) for g in grid])
    total = np.trapezoid(dens, dx=grid[1, 0] - grid[0, 0])
    assert total == pytest.approx(1.0, abs=1e-4)


def test_unconditional_tweedie_identity():
    # The denoiser must equal (x + sigma^2 * d log q / dx) / alpha.
    gmm = two_component_2d()
    rng = np.random.default_rng(11)
    for path in (CondOTPath(), VPPath()):
        den = gmm_denoiser(gmm, path)
        for _ in range(20):
            t = rng.uniform(0.1, 0.95)
            a, s, _, _, _ = path.schedule(t)
            if a < 0.05:
                continue
            x = rng.standard_normal(2)
            h = 1e-5 * (1.0 + np.max(np.abs(x)))
            grad = np.zeros(2)
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                grad[j] = (
                    gmm_log_marginal(gmm, path, t, x + e) - gmm_log_marginal(gmm, path, t, x - e)
                ) / (2 * h)
            tweedie = (x + s**2 * grad) / a
            closed = den.evaluator(x, t)
            assert np.max(np.abs(tweedie - closed)) / max(1.0, np.max(np.abs(closed))) <= 1e-5


# -----------------------------------------------------------------------
# Mixture construction
# -----------------------------------------------------------------------


def test_mixture_validation_errors():
    with pytest.raises(ValueError):
        GaussianMixture(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones(2), isotropic=True)
    with pytest.raises(ValueError):
        GaussianMixture(np.array([1.5, -0.5]), np.zeros((2, 1)), np.ones(2), isotropic=True)
    with pytest.raises(ValueError):
        GaussianMixture(np.array([1.0]), np.zeros((1, 2)), np.array([[[1.0, 0.5], [0.4, 1.0]]]), isotropic=False)
    with pytest.raises(ValueError):
        GaussianMixture(np.array([1.0]), np.zeros((1, 2)), np.ones(2), isotropic=True)


def test_mixture_spec_round_trip():
    gmm = two_component_2d()
    again = GaussianMixture.from_spec(gmm.to_spec())
    np.testing.assert_array_equal(again.weights, gmm.weights)
    np.testing.assert_array_equal(again.covariances, gmm.covariances)
    iso = GaussianMixture.standard_normal(2)
    again = GaussianMixture.from_spec(iso.to_spec())
    assert again.isotropic
    with pytest.raises(ValueError):
        GaussianMixture.from_spec({"weights": [1.0], "means": [[0.0]], "covariances": [[1.0]], "x": 1})


def test_mixture_sampling_moments():
    gmm = two_component_2d()
    rng = np.random.default_rng(12)
    draws = gmm.sample(200000, rng)
    mean = gmm.weights @ gmm.means
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.02)
