import math
import time

import numpy as np
import pytest
from scipy.special import expit

from labelbias.models import INTERCEPT, CovariateSpec, ThresholdDataset, ThresholdSpec
from labelbias.regress import logistic_fit
from labelbias.sampler import SamplerConfig
from labelbias.simdata import simulate_threshold_dgp
from labelbias.threshold import (
    ThresholdError,
    UnknownGroup,
    calibrate_spec,
    check_calibration,
    fit_threshold,
    margin_table,
    no_diagnosis_probability,
    point_posterior_beta,
    predict_risk,
    proxy_probability,
    row_thresholds,
    slack_quadrature,
    solve_base_rate,
    solve_threshold,
    threshold_loglik,
    undiagnosed_share,
)


def test_base_rate_is_logit_of_prevalence():
    assert solve_base_rate(0.14) == pytest.approx(-1.8153, abs=1e-4)
    with pytest.raises(ThresholdError):
        solve_base_rate(1.0)


@pytest.mark.parametrize("share,expected", [(0.16, 0.21), (0.29, 0.38)])
def test_thresholds_for_diagnosis_gaps(share, expected):
    alpha = solve_base_rate(0.14)
    tau = solve_threshold(alpha, share)
    assert undiagnosed_share(alpha, tau) == pytest.approx(share, abs=1e-8)
    assert tau == pytest.approx(expected, abs=0.011)


def test_threshold_edge_cases():
    assert solve_threshold(-1.8, 0.0) == 0.0
    # large shares need the bracket to grow past the initial upper bound
    tau = solve_threshold(-1.8, 0.95)
    assert tau > 1.0
    assert undiagnosed_share(-1.8, tau) == pytest.approx(0.95, abs=1e-8)
    with pytest.raises(ThresholdError):
        solve_threshold(-1.8, 1.0)


def test_calibrate_spec_orders_groups():
    spec = calibrate_spec(0.14, {"insured": 0.16, "uninsured": 0.29})
    assert spec.groups == ("insured", "uninsured")
    assert spec.tau_by_group["insured"] < spec.tau_by_group["uninsured"]
    assert spec.e_scale == 0.1


def test_quadrature_integrates_half_normal():
    quad = slack_quadrature(0.1)
    assert quad.weights.sum() == pytest.approx(1.0)
    assert quad.nodes.min() >= 0.0
    assert quad.weights @ quad.nodes == pytest.approx(0.1 * math.sqrt(2 / math.pi), rel=1e-6)
    assert quad.weights @ quad.nodes**2 == pytest.approx(0.01, rel=1e-6)
    assert slack_quadrature(0.1) is quad
    with pytest.raises(ThresholdError):
        slack_quadrature(0.0)


def test_probabilities_are_complementary():
    linear = np.linspace(-40.0, 40.0, 81)
    tau = np.full(linear.shape, 0.3)
    total = proxy_probability(linear, tau, 0.1) + no_diagnosis_probability(linear, tau, 0.1)
    np.testing.assert_allclose(total, 1.0, atol=1e-12)
    assert np.all(no_diagnosis_probability(linear, tau, 0.1) > 0)


def _toy_data(y):
    X = np.column_stack([np.ones(4), [0.0, 1.0, -1.0, 2.0]])
    return ThresholdDataset(
        X=X, group=["a", "b", "a", "b"], y=y, column_names=(INTERCEPT, "x1")
    )


def test_loglik_reduces_to_logistic_without_slack():
    spec = ThresholdSpec(base_alpha=0.0, tau_by_group={"a": 0.2, "b": 0.5}, e_scale=1e-9)
    data = _toy_data([1.0, 0.0, 0.0, 1.0])
    beta = np.array([0.3, 0.8])
    margin = data.X @ beta - np.array([0.2, 0.5, 0.2, 0.5])
    p = expit(margin)
    expected = np.sum(data.y * np.log(p) + (1 - data.y) * np.log(1 - p))
    assert threshold_loglik(beta, data, spec) == pytest.approx(expected, rel=1e-7)


def test_loglik_is_finite_in_the_tails():
    spec = ThresholdSpec(base_alpha=0.0, tau_by_group={"a": 0.2, "b": 0.5})
    data = _toy_data([1.0, 0.0, 0.0, 1.0])
    assert np.isfinite(threshold_loglik(np.array([-60.0, 0.0]), data, spec))
    with pytest.raises(ThresholdError):
        threshold_loglik(np.zeros(3), data, spec)


def test_unknown_group():
    spec = ThresholdSpec(base_alpha=0.0, tau_by_group={"a": 0.2})
    with pytest.raises(UnknownGroup) as info:
        row_thresholds(np.array(["a", "b", "c"], dtype=object), spec)
    assert info.value.groups == ("b", "c")


def test_simulated_calibration_matches_targets():
    targets = {"insured": 0.16, "uninsured": 0.29}
    spec = calibrate_spec(0.14, targets)
    check = check_calibration(spec, 200_000, seed=5, targets=targets)
    assert list(check["group"]) == ["insured", "uninsured"]
    np.testing.assert_allclose(check["share_no_slack"], check["target"], atol=0.01)
    assert np.all(check["slack_delta"] >= 0)


def test_risk_given_diagnosis():
    spec = ThresholdSpec(base_alpha=0.0, tau_by_group={"a": 0.2, "b": 0.5})
    samples = point_posterior_beta([0.3, 0.8], [INTERCEPT, "x1"])
    data = _toy_data([1.0, 0.0, 0.0, 1.0])
    risk = predict_risk(samples, data.X, data.group, data.y, spec)
    np.testing.assert_allclose(risk.p_true[[0, 3]], 1.0)
    np.testing.assert_allclose(risk.p_marginal, expit(data.X @ [0.3, 0.8]))
    undiagnosed = [1, 2]
    assert np.all(risk.p_true[undiagnosed] < risk.p_marginal[undiagnosed])
    np.testing.assert_allclose(risk.sd, 0.0, atol=1e-7)

    unobserved = predict_risk(samples, data.X, data.group, None, spec)
    np.testing.assert_allclose(unobserved.p_true, unobserved.p_marginal)

    frame = risk.to_frame(data.group, data.y)
    assert list(frame.columns) == ["row_id", "group", "y", "p_true", "p_marginal", "sd"]


def test_zero_threshold_means_no_hidden_cases():
    spec = ThresholdSpec(base_alpha=0.0, tau_by_group={"a": 0.0, "b": 0.0}, e_scale=1e-9)
    samples = point_posterior_beta([0.3, 0.8], [INTERCEPT, "x1"])
    data = _toy_data([0.0, 0.0, 0.0, 0.0])
    risk = predict_risk(samples, data.X, data.group, data.y, spec)
    np.testing.assert_allclose(risk.p_true, 0.0, atol=1e-6)


def test_point_posterior_beta_checks_lengths():
    with pytest.raises(ThresholdError):
        point_posterior_beta([0.1, 0.2], [INTERCEPT])


@pytest.fixture(scope="module")
def diagnosis_data():
    spec = calibrate_spec(0.14, {"insured": 0.16, "uninsured": 0.29})
    covariates = CovariateSpec(n_continuous=1)
    coefs = [-1.2, 0.3, 0.8]
    data = simulate_threshold_dgp(coefs, spec, 3_000, seed=17, covariate_spec=covariates)
    return spec, coefs, data


def test_fit_recovers_latent_coefficients(diagnosis_data, fast_sampler):
    spec, coefs, data = diagnosis_data
    samples = fit_threshold(data, spec, sconf=fast_sampler, require_convergence=False)
    assert samples.chains.param_names == data.column_names
    means = [samples.mean(name) for name in data.column_names]
    np.testing.assert_allclose(means, coefs, atol=0.45)

    risk = predict_risk(samples, data.X, data.group, data.y, spec, max_draws=25)
    assert np.all((risk.p_true >= 0) & (risk.p_true <= 1))
    assert np.all(risk.p_true[data.y == 1] == 1.0)
    # averaging over draws gives a non-degenerate spread
    assert risk.sd[data.y == 0].max() > 0
    # the proxy under-counts true cases; the model's marginal risk should not
    assert abs(risk.p_marginal.mean() - data.u3.mean()) < abs(data.y.mean() - data.u3.mean())


@pytest.mark.slow
def test_quadrature_matches_monte_carlo():
    rng = np.random.default_rng(12)
    slack = np.abs(0.1 * rng.standard_normal(1_000_000))
    linear = np.array([-2.0, 0.1, 1.5])
    tau = np.array([0.21, 0.38, 0.0])
    expected = [np.mean(expit(m - t - slack)) for m, t in zip(linear, tau)]
    np.testing.assert_allclose(proxy_probability(linear, tau, 0.1), expected, atol=1e-4)


@pytest.mark.slow
def test_risk_given_no_diagnosis_matches_monte_carlo():
    rng = np.random.default_rng(13)
    n = 1_000_000
    linear, tau = -0.5, 0.38
    u1 = linear + rng.logistic(0.0, 1.0, size=n)
    slack = np.abs(0.1 * rng.standard_normal(n))
    undiagnosed = u1 < tau + slack
    expected = np.mean(u1[undiagnosed] >= 0)

    spec = ThresholdSpec(base_alpha=linear, tau_by_group={"a": tau})
    samples = point_posterior_beta([linear], [INTERCEPT])
    risk = predict_risk(samples, np.ones((1, 1)), np.array(["a"], dtype=object), np.zeros(1), spec)
    assert risk.p_true[0] == pytest.approx(expected, abs=0.002)


def test_hidden_risk_grows_with_the_threshold():
    samples = point_posterior_beta([-0.5], [INTERCEPT])
    risks = []
    for tau in (0.0, 0.2, 0.4, 0.8, 1.6):
        spec = ThresholdSpec(base_alpha=-0.5, tau_by_group={"a": tau})
        group = np.array(["a"], dtype=object)
        risks.append(predict_risk(samples, np.ones((1, 1)), group, np.zeros(1), spec).p_true[0])
    assert np.all(np.diff(risks) > 0)


def _wide_margin_data(n, seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), 15.0 * rng.standard_normal(n)])
    group = np.where(rng.random(n) < 0.3, "b", "a").astype(object)
    y = (rng.random(n) < 0.4).astype(float)
    return ThresholdDataset(X=X, group=group, y=y, column_names=(INTERCEPT, "x1"))


@pytest.mark.parametrize("e_scale", [1e-9, 0.1, 0.5])
def test_spline_loglik_matches_quadrature(e_scale):
    spec = ThresholdSpec(base_alpha=0.0, tau_by_group={"a": 0.2, "b": 0.5}, e_scale=e_scale)
    data = _wide_margin_data(5_000, seed=int(e_scale * 100))
    rng = np.random.default_rng(3)
    for beta in rng.normal(0.0, [1.0, 0.3], size=(5, 2)):
        # margins run past the table edges on both sides
        exact = threshold_loglik(beta, data, spec, exact=True)
        assert threshold_loglik(beta, data, spec) == pytest.approx(exact, abs=1e-6)
    table = margin_table(e_scale)
    assert margin_table(e_scale) is table
    margins = np.linspace(-table.limit + 1.0, table.limit - 1.0, 27)
    for y, spline in ((1.0, table.log_p1), (0.0, table.log_p0)):
        # one row in group "a": the margin is beta - 0.2
        row = _single_row(y)
        exact = [threshold_loglik(np.array([m + 0.2]), row, spec, exact=True) for m in margins]
        np.testing.assert_allclose(spline(margins), exact, atol=1e-8, rtol=0)


def _single_row(y):
    return ThresholdDataset(
        X=np.ones((1, 1)),
        group=np.array(["a"], dtype=object),
        y=np.array([y]),
        column_names=(INTERCEPT,),
    )


def test_loglik_is_fast_at_full_scale():
    spec = calibrate_spec(0.14, {"insured": 0.16, "uninsured": 0.29})
    data = simulate_threshold_dgp([-2.2, 0.3, 0.8, 0.5], spec, 100_000, seed=2)
    beta = np.array([-2.0, 0.2, 0.7, 0.4])
    threshold_loglik(beta, data, spec)
    start = time.perf_counter()
    for _ in range(20):
        threshold_loglik(beta, data, spec)
    # the dense quadrature took close to a second per call at this size
    assert (time.perf_counter() - start) / 20 < 0.1


@pytest.fixture(scope="module")
def perfect_proxy_data():
    spec = ThresholdSpec(
        base_alpha=-1.0, tau_by_group={"insured": 0.0, "uninsured": 0.0}, e_scale=1e-9
    )
    covariates = CovariateSpec(n_continuous=1)
    data = simulate_threshold_dgp([-1.0, 0.4, 0.9], spec, 3_000, seed=23, covariate_spec=covariates)
    return spec, data


def test_zero_threshold_fit_is_logistic_regression(perfect_proxy_data):
    spec, data = perfect_proxy_data
    np.testing.assert_array_equal(data.y, data.u3)
    config = SamplerConfig(chains=4, warmup=3_000, draws=3_000, seed=11, adapt_window=50)
    samples = fit_threshold(data, spec, sconf=config)
    reference = logistic_fit(data.X, data.y)
    means = [samples.mean(name) for name in data.column_names]
    np.testing.assert_allclose(means, reference.coeffs, atol=0.02)

    p = expit(data.X @ reference.coeffs)
    information = data.X.T @ ((p * (1 - p))[:, None] * data.X)
    expected_sd = np.sqrt(np.diag(np.linalg.inv(information)))
    sds = [np.std(samples.param(name)) for name in data.column_names]
    np.testing.assert_allclose(sds, expected_sd, rtol=0.15)

    assert samples.max_rhat[1] < 1.01
    assert samples.min_ess[1] > 400
