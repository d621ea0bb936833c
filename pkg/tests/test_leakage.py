import numpy as np
import pytest
from scipy.stats import multivariate_normal

from labelbias.leakage import (
    LeakageError,
    LeakageParams,
    LeakagePriors,
    NonPositiveDefiniteCovariance,
    ProxyMoments,
    UnknownMode,
    fit_leakage,
    marginal_loglik,
    misspecify_priors,
    point_posterior,
    posterior_summary,
    predict_latent,
)
from labelbias.models import PriorSpec
from labelbias.sampler import SamplerConfig
from labelbias.simdata import simulate_sem, standardize_sem

PARAMS = standardize_sem(0.3, 0.4, 0.4, 0.5)


@pytest.fixture(scope="module")
def sem_data():
    return simulate_sem(PARAMS, 2_000, seed=21)


def _pinned(value):
    return PriorSpec("normal", value, 0.0)


def _conditional_mean(params, x, observed):
    """E[u1 | x, observed proxies] by explicit Gaussian conditioning."""

    su2 = params.sigma_u**2
    var = params.gamma**2 * su2 + params.sigma_y**2
    cross = params.gamma**2 * su2 * params.eta
    proxy_cov = np.array([[var, cross], [cross, var]])
    latent_cov = np.array([params.gamma * params.eta * su2, params.gamma * su2])
    k = len(observed)
    gains = np.linalg.solve(proxy_cov[:k, :k], latent_cov[:k])
    slope = params.alpha + params.gamma * params.beta
    residuals = np.column_stack([y - slope * x for y in observed])
    return params.beta * x + residuals @ gains


def test_marginal_loglik_matches_bivariate_normal(sem_data):
    params = LeakageParams.from_sem(PARAMS)
    su2 = PARAMS.sigma_u**2
    var = PARAMS.gamma**2 * su2 + PARAMS.sigma_y**2
    cov = PARAMS.gamma**2 * su2 * PARAMS.eta
    mean = (PARAMS.alpha + PARAMS.gamma * PARAMS.beta) * sem_data.x
    points = np.column_stack([sem_data.y0 - mean, sem_data.y1 - mean])
    density = multivariate_normal(mean=[0.0, 0.0], cov=[[var, cov], [cov, var]])
    expected = density.logpdf(points).sum()
    assert marginal_loglik(params, sem_data) == pytest.approx(expected, rel=1e-10)


def test_marginal_loglik_rejects_singular_covariance(sem_data):
    params = LeakageParams(alpha=0.4, gamma=0.0, beta=0.0, eta=0.5, sigma_y=1e-200)
    with pytest.raises(NonPositiveDefiniteCovariance):
        marginal_loglik(params, sem_data.subset(np.arange(10)))


def test_params_validation():
    with pytest.raises(LeakageError):
        LeakageParams(alpha=0.0, gamma=0.4, beta=0.0, eta=1.0, sigma_y=0.5)
    with pytest.raises(LeakageError):
        LeakageParams(alpha=0.0, gamma=0.4, beta=0.0, eta=0.5, sigma_y=0.0)


@pytest.mark.parametrize("mode", ["filtering", "smoothing"])
def test_point_posterior_prediction_is_gaussian_conditioning(sem_data, mode):
    samples = point_posterior(LeakageParams.from_sem(PARAMS))
    prediction = predict_latent(samples, sem_data.x, sem_data.y0, mode=mode, y1=sem_data.y1)
    observed = [sem_data.y0] if mode == "filtering" else [sem_data.y0, sem_data.y1]
    np.testing.assert_allclose(prediction.mean, _conditional_mean(PARAMS, sem_data.x, observed))
    assert np.all(prediction.sd > 0)
    assert np.all(prediction.sd < PARAMS.sigma_u)


def test_smoothing_is_at_least_as_sharp_as_filtering(sem_data):
    samples = point_posterior(LeakageParams.from_sem(PARAMS))
    filtered = predict_latent(samples, sem_data.x, sem_data.y0, mode="filtering")
    smoothed = predict_latent(samples, sem_data.x, sem_data.y0, mode="smoothing", y1=sem_data.y1)
    assert smoothed.sd[0] <= filtered.sd[0]
    assert np.mean((smoothed.mean - sem_data.u1) ** 2) < np.mean((filtered.mean - sem_data.u1) ** 2)


def test_prediction_mode_errors(sem_data):
    samples = point_posterior(LeakageParams.from_sem(PARAMS))
    with pytest.raises(UnknownMode):
        predict_latent(samples, sem_data.x, sem_data.y0, mode="forecast")
    with pytest.raises(LeakageError, match="y1"):
        predict_latent(samples, sem_data.x, sem_data.y0, mode="smoothing")


def test_misspecified_prior_centers():
    beta_priors = misspecify_priors(standardize_sem(0.2, 0.4, 0.4, 0.5), 1.5, "beta")
    assert beta_priors.beta.loc == pytest.approx(0.3)
    assert beta_priors.gamma.loc == pytest.approx(0.4)
    gamma_priors = misspecify_priors(standardize_sem(0.2, 0.4, 0.4, 0.5), 0.5, "gamma")
    assert gamma_priors.gamma.loc == pytest.approx(0.2)
    assert gamma_priors.beta.loc == pytest.approx(0.2)
    with pytest.raises(LeakageError):
        misspecify_priors(PARAMS, 0.0, "beta")
    with pytest.raises(LeakageError):
        misspecify_priors(PARAMS, 1.0, "alpha")


def test_without_covariates_pins_alpha_and_beta():
    priors = LeakagePriors.from_truth(PARAMS).without_covariates()
    assert priors.alpha.is_point_mass and priors.beta.is_point_mass
    assert priors.sigma_u == pytest.approx(1.0)


def test_fit_recovers_identified_parameters(sem_data, fast_sampler):
    samples = fit_leakage(
        sem_data, LeakagePriors.from_truth(PARAMS), fast_sampler, require_convergence=False
    )
    assert samples.chains.param_names == ("alpha", "gamma", "beta", "eta", "sigma_y")
    slope = samples.param("alpha") + samples.param("gamma") * samples.param("beta")
    assert np.mean(slope) == pytest.approx(PARAMS.alpha + PARAMS.gamma * PARAMS.beta, abs=0.06)
    assert samples.mean("alpha") == pytest.approx(PARAMS.alpha, abs=0.1)
    assert np.all(samples.param("sigma_y") > 0)
    assert np.all(np.abs(samples.param("eta")) < 1)

    summary = posterior_summary(samples)
    assert set(summary["parameter"]) == {"alpha", "gamma", "beta", "eta", "sigma_y", "sigma_u"}
    assert summary.set_index("parameter").loc["sigma_u", "fixed"]


def test_fit_without_covariates_keeps_pins(sem_data, fast_sampler):
    priors = LeakagePriors.from_truth(PARAMS).without_covariates()
    samples = fit_leakage(sem_data, priors, fast_sampler, require_convergence=False)
    assert samples.chains.param_names == ("gamma", "eta", "sigma_y")
    assert samples.fixed["alpha"] == 0.0 and samples.fixed["beta"] == 0.0
    prediction = predict_latent(samples, sem_data.x, sem_data.y0)
    assert prediction.mean.shape == (sem_data.n,)


def test_fit_with_every_parameter_pinned(sem_data, fast_sampler):
    pinned = LeakagePriors(
        alpha=_pinned(PARAMS.alpha),
        gamma=_pinned(PARAMS.gamma),
        beta=_pinned(PARAMS.beta),
        eta=_pinned(PARAMS.eta),
        sigma_y=_pinned(PARAMS.sigma_y),
        sigma_u=PARAMS.sigma_u,
    )
    samples = fit_leakage(sem_data, pinned, fast_sampler)
    assert samples.mean("gamma") == pytest.approx(PARAMS.gamma)


def _random_leakage_params(rng):
    return LeakageParams(
        alpha=rng.uniform(-0.5, 0.5),
        gamma=rng.uniform(0.3, 1.0),
        beta=rng.uniform(-0.5, 0.5),
        eta=rng.uniform(-0.8, 0.8),
        sigma_y=rng.uniform(0.3, 1.0),
        sigma_u=rng.uniform(0.5, 1.2),
    )


@pytest.mark.parametrize("seed", range(10))
def test_marginal_loglik_matches_grid_integration(seed):
    from scipy.integrate import trapezoid
    from scipy.stats import norm

    rng = np.random.default_rng(100 + seed)
    params = _random_leakage_params(rng)
    data = simulate_sem(standardize_sem(0.2, 0.3, 0.7, 0.4), 2, seed=13 + seed)
    grid = np.linspace(-8.0, 8.0, 641)
    u0, u1 = np.meshgrid(grid, grid, indexing="ij")
    latent = multivariate_normal(
        mean=[0.0, 0.0],
        cov=params.sigma_u**2 * np.array([[1.0, params.eta], [params.eta, 1.0]]),
    )
    total = 0.0
    for i in range(data.n):
        x = data.x[i]
        mean_u = params.beta * x
        density = latent.pdf(np.dstack([u0 - mean_u, u1 - mean_u]))
        shift = params.alpha * x
        density = density * norm.pdf(data.y0[i], shift + params.gamma * u0, params.sigma_y)
        density = density * norm.pdf(data.y1[i], shift + params.gamma * u1, params.sigma_y)
        total += np.log(trapezoid(trapezoid(density, grid, axis=1), grid))
    assert marginal_loglik(params, data) == pytest.approx(total, rel=1e-6)


def test_moments_give_the_same_likelihood_as_rows(sem_data):
    params = LeakageParams(alpha=0.1, gamma=0.8, beta=-0.3, eta=-0.2, sigma_y=0.9, sigma_u=1.1)
    moments = ProxyMoments.from_data(sem_data)
    assert moments.n == sem_data.n
    assert marginal_loglik(params, moments) == marginal_loglik(params, sem_data)
    d00, _, d01 = moments.residual_products(0.5)
    assert d00 == pytest.approx(np.sum((sem_data.y0 - 0.5 * sem_data.x) ** 2), rel=1e-10)
    d0, d1 = sem_data.y0 - 0.5 * sem_data.x, sem_data.y1 - 0.5 * sem_data.x
    assert d01 == pytest.approx(np.sum(d0 * d1), rel=1e-10)


CONVERGED = SamplerConfig(chains=4, warmup=3_000, draws=3_000, seed=5, adapt_window=50)


def _identified_spreads(n):
    """Posterior sd of the proxy slope and of the proxy variance."""

    data = simulate_sem(PARAMS, n, seed=31)
    samples = fit_leakage(data, LeakagePriors.from_truth(PARAMS), CONVERGED)
    gamma = samples.param("gamma")
    slope = samples.param("alpha") + gamma * samples.param("beta")
    variance = (gamma * samples.param("sigma_u")) ** 2 + samples.param("sigma_y") ** 2
    return np.array([np.std(slope), np.std(variance)])


def test_identified_posterior_contracts_with_n():
    # sixteen times the rows: a quarter of the spread
    ratio = _identified_spreads(1_000) / _identified_spreads(16_000)
    np.testing.assert_allclose(ratio, 4.0, rtol=0.35)


def test_default_length_fit_passes_the_convergence_gate(sem_data):
    samples = fit_leakage(sem_data, LeakagePriors.from_truth(PARAMS), CONVERGED)
    assert samples.converged
    assert samples.max_rhat[1] < 1.05
    assert samples.min_ess[1] > 200
    assert np.all(samples.chains.accept_rate > 0.1)
    assert np.all(samples.chains.accept_rate < 0.6)


def test_uncorrelated_latents_make_filtering_ignore_the_proxy(sem_data):
    params = LeakageParams(alpha=0.4, gamma=0.4, beta=0.3, eta=0.0, sigma_y=0.7)
    prediction = predict_latent(point_posterior(params), sem_data.x, sem_data.y0)
    np.testing.assert_allclose(prediction.mean, 0.3 * sem_data.x)
