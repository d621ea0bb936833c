"""Experiment bodies behind the CLI subcommands.

Each function takes a validated :class:`~labelbias.config.ExperimentConfig`
and returns frames; writing them is left to the caller.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from .config import ExperimentConfig
from .leakage import (
    LeakagePriors,
    fit_leakage,
    misspecify_priors,
    posterior_summary,
    predict_latent,
)
from .metrics import (
    CalibrationCurve,
    MetricsReport,
    calibration_curve,
    error_covariate_correlation,
    evaluate_binary,
    metrics_table,
    rmse,
)
from .models import CovariateSpec, SemDataset, SemParams, ThresholdDataset, ThresholdSpec
from .regress import (
    logistic_fit,
    measurement_regression,
    mse_lower_bound,
    ols_fit,
    population_beta,
    population_measurement,
    prediction_error_covariance,
    proxy_solution,
)
from .sampler import PosteriorSamples, SamplerConfig, require_converged
from .simdata import (
    DatasetError,
    InfeasibleStandardization,
    load_csv,
    load_schema,
    rng_for,
    simulate_sem,
    simulate_threshold_dgp,
    standardize_sem,
)
from .threshold import (
    ThresholdError,
    calibrate_spec,
    check_calibration,
    fit_threshold,
    predict_risk,
)

log = logging.getLogger(__name__)

PROPS_KEY = 1
SWEEP_KEY = 2
MISSPEC_KEY = 3
DIABETES_KEY = 4
SAMPLER_KEY = 99

TRAIN_STREAM = 0
TEST_STREAM = 1

CALIBRATION_CHECK_N = 1_000_000


def _design(data: SemDataset) -> np.ndarray:
    return np.column_stack([np.ones(data.n), data.x])


# --- propositions -----------------------------------------------------------


@dataclass(frozen=True)
class PropsReport:
    rows: pd.DataFrame
    skipped: pd.DataFrame

    @property
    def passed(self) -> bool:
        return bool(self.rows["passed"].all()) if len(self.rows) else False


def _prop_row(
    point: Mapping[str, float], prop: str, kind: str, delta: float, tolerance: float
) -> Dict[str, object]:
    return {
        **point,
        "proposition": prop,
        "check": kind,
        "delta": delta,
        "tolerance": tolerance,
        "passed": bool(delta <= tolerance),
    }


def _in_se(delta: np.ndarray, se: np.ndarray) -> float:
    """Largest ``|delta| / se``; a zero standard error only tolerates a zero delta."""

    delta = np.abs(np.atleast_1d(delta))
    se = np.atleast_1d(se)
    safe = np.where(se > 0, se, 1.0)
    ratios = np.where(se > 0, delta / safe, np.where(delta > 1e-12, np.inf, 0.0))
    return float(np.max(ratios))


def _check_point(
    params: SemParams, data: SemDataset, k: float, identity_tol: float
) -> List[Dict[str, object]]:
    point = {"beta": params.beta, "gamma": params.gamma, "alpha": params.alpha, "n": data.n}
    X = _design(data)
    n = data.n
    truth_fit = ols_fit(X, data.u1)
    proxy_fit = ols_fit(X, data.y1)
    mc = measurement_regression(X, data.u1, data.y1)
    err = data.u1 - proxy_fit.predict(X)

    pop_beta = population_beta(params)
    pop_mc = population_measurement(params)
    pop_xtx = np.eye(2)
    rows = []

    # proxy coefficients
    predicted = proxy_solution(truth_fit.coeffs, mc)
    rows.append(
        _prop_row(
            point,
            "proxy_solution",
            "identity",
            float(np.max(np.abs(proxy_fit.coeffs - predicted))),
            identity_tol,
        )
    )
    coef_se = np.sqrt(proxy_fit.residual_variance * np.diag(np.linalg.inv(proxy_fit.xtx)) / n)
    coef_delta = proxy_fit.coeffs - proxy_solution(pop_beta, pop_mc)
    rows.append(_prop_row(point, "proxy_solution", "population", _in_se(coef_delta, coef_se), k))

    # error-covariate covariance; the in-sample value equals -(1/n) X'(y - u) exactly
    empirical_cov = err @ X / n
    sample_cov = prediction_error_covariance(truth_fit.coeffs, mc, truth_fit.xtx)
    rows.append(
        _prop_row(
            point,
            "error_covariance",
            "identity",
            float(np.max(np.abs(empirical_cov - sample_cov))),
            identity_tol,
        )
    )
    cov_se = np.std((data.u1 - data.y1)[:, None] * X, axis=0, ddof=1) / math.sqrt(n)
    cov_delta = empirical_cov - prediction_error_covariance(pop_beta, pop_mc, pop_xtx)
    rows.append(_prop_row(point, "error_covariance", "population", _in_se(cov_delta, cov_se), k))

    # mse bound
    empirical_mse = float(np.mean(err**2))
    sample_bound = mse_lower_bound(truth_fit.residual_variance, truth_fit.coeffs, mc, truth_fit.xtx)
    rows.append(
        _prop_row(point, "mse_bound", "identity", abs(empirical_mse - sample_bound), identity_tol)
    )
    population_bound = mse_lower_bound(params.sigma_u**2, pop_beta, pop_mc, pop_xtx)
    # the fitted bias direction adds its own first-order noise to the quadratic term
    bias = proxy_fit.coeffs - truth_fit.coeffs
    mse_se = math.sqrt(
        float(np.var(err**2, ddof=1)) / n
        + float(np.sum((2.0 * (proxy_fit.xtx @ bias) * coef_se) ** 2))
    )
    shortfall = max(0.0, population_bound - empirical_mse)
    shortfall_se = _in_se(np.array(shortfall), np.array(mse_se))
    rows.append(_prop_row(point, "mse_bound", "population", shortfall_se, k))
    return rows


def verify_props(config: ExperimentConfig) -> PropsReport:
    """Sample identities and population agreement for the proxy-regression results.

    The identity checks hold exactly for any sample; the population checks
    compare the analytic SEM values to the fitted ones in units of Monte Carlo
    standard errors (``delta`` and ``tolerance`` are in those units).
    """

    props = config.props
    rows: List[Dict[str, object]] = []
    skipped: List[Dict[str, object]] = []
    grid = itertools.product(props.betas, props.gammas, props.alphas)
    for index, (beta, gamma, alpha) in enumerate(grid):
        try:
            params = standardize_sem(beta, alpha, gamma, props.eta)
        except InfeasibleStandardization as exc:
            log.info("Skipping beta=%s gamma=%s alpha=%s: %s", beta, gamma, alpha, exc)
            skipped.append({"beta": beta, "gamma": gamma, "alpha": alpha, "reason": str(exc)})
            continue
        data = simulate_sem(params, props.n, config.derived_seed(PROPS_KEY, index))
        rows.extend(_check_point(params, data, props.tolerance_sigmas, props.identity_tolerance))

    frame = pd.DataFrame(rows)
    failed = int((~frame["passed"]).sum()) if len(frame) else 0
    log.info(
        "Checked %d grid points (%d skipped), %d failed checks",
        len(rows) // 6,
        len(skipped),
        failed,
    )
    skipped_frame = pd.DataFrame(skipped, columns=["beta", "gamma", "alpha", "reason"])
    return PropsReport(rows=frame, skipped=skipped_frame)


# --- leakage sweeps ---------------------------------------------------------


def _metric_rows(
    base: Mapping[str, object],
    model: str,
    truth: np.ndarray,
    pred: np.ndarray,
    x: np.ndarray,
    samples: Optional[PosteriorSamples] = None,
) -> List[Dict[str, object]]:
    """RMSE and error-covariate correlation rows, with the fit's worst R-hat and ESS."""

    diagnostics = {
        "max_rhat": samples.max_rhat[1] if samples is not None else math.nan,
        "min_ess": samples.min_ess[1] if samples is not None else math.nan,
    }
    return [
        {**base, "model": model, "metric": "rmse", "value": rmse(truth, pred), **diagnostics},
        {
            **base,
            "model": model,
            "metric": "error_x_corr",
            "value": error_covariate_correlation(truth, pred, x),
            **diagnostics,
        },
    ]


def _gated_fit(
    fit: Callable[[SamplerConfig], PosteriorSamples],
    config: ExperimentConfig,
    seed: int,
    what: str,
) -> PosteriorSamples:
    """Run ``fit``; while R-hat misses the gate, re-run at twice the length.

    After ``sampler.retries`` re-runs a miss raises
    :class:`~labelbias.sampler.NotConverged` unless ``sampler.require_convergence``
    is off, in which case it is logged and the draws are kept.
    """

    settings = config.sampler
    sconf = settings.for_seed(seed)
    samples = fit(sconf)
    for _ in range(settings.retries):
        if samples.converged:
            break
        name, value = samples.max_rhat
        sconf = sconf.model_copy(update={"warmup": 2 * sconf.warmup, "draws": 2 * sconf.draws})
        log.warning(
            "%s: R-hat %.3f for %s; re-running with %d warmup and %d draws",
            what,
            value,
            name,
            sconf.warmup,
            sconf.draws,
        )
        samples = fit(sconf)
    return require_converged(samples, settings.require_convergence, what)


def _regression_predictions(train: SemDataset, test: SemDataset) -> Dict[str, np.ndarray]:
    simple = ols_fit(np.column_stack([np.ones(train.n), train.y0]), train.y1)
    complex_ = ols_fit(np.column_stack([np.ones(train.n), train.y0, train.x]), train.y1)
    oracle = ols_fit(np.column_stack([np.ones(train.n), train.y0, train.x]), train.u1)
    simple_X = np.column_stack([np.ones(test.n), test.y0])
    full_X = np.column_stack([np.ones(test.n), test.y0, test.x])
    return {
        "simple": simple.predict(simple_X),
        "complex": complex_.predict(full_X),
        "oracle": oracle.predict(full_X),
    }


def _leakage_prediction(
    config: ExperimentConfig, train: SemDataset, test: SemDataset, priors: LeakagePriors, seed: int
) -> Tuple[np.ndarray, PosteriorSamples]:
    samples = _gated_fit(
        lambda sconf: fit_leakage(train, priors, sconf, require_convergence=False),
        config,
        seed,
        "leakage fit",
    )
    prediction = predict_latent(samples, test.x, test.y0, mode=config.mode, y1=test.y1)
    return prediction.mean, samples


def _split(params: SemParams, n: int, seed: int) -> Tuple[SemDataset, SemDataset]:
    return (
        simulate_sem(params, n, seed, stream=TRAIN_STREAM),
        simulate_sem(params, n, seed, stream=TEST_STREAM),
    )


@dataclass(frozen=True, eq=False)
class SweepResult:
    """Long-format metrics plus the posterior summary of every leakage fit.

    Metric rows carry the fit's ``max_rhat`` and ``min_ess`` (NaN for the
    regression baselines).
    """

    metrics: pd.DataFrame
    posterior: pd.DataFrame


def _with_keys(frame: pd.DataFrame, keys: Mapping[str, object]) -> pd.DataFrame:
    frame = frame.copy()
    for position, (name, value) in enumerate(keys.items()):
        frame.insert(position, name, value)
    return frame


def beta_sweep(config: ExperimentConfig) -> SweepResult:
    """RMSE and error-covariate correlation of every model across the beta grid.

    Models: ``simple`` E(y1 | y0), ``complex`` E(y1 | y0, x), ``leakage`` and
    ``leakage_no_x`` (posterior predictions of u1), and ``oracle`` (OLS fit to
    the true u1). Metrics are computed on an independent test sample.
    """

    sem, sweep = config.sem, config.sweep
    rows: List[Dict[str, object]] = []
    posteriors: List[pd.DataFrame] = []
    for replicate in range(sweep.replicates):
        for index, beta in enumerate(sweep.betas):
            params = standardize_sem(beta, sem.alpha, sem.gamma, sem.eta)
            seed = config.derived_seed(SWEEP_KEY, replicate, index)
            train, test = _split(params, sweep.n, seed)
            base = {"sweep_index": index, "replicate": replicate, "beta": beta, "seed": seed}
            log.info(
                "beta sweep %d/%d: beta=%.2f replicate=%d",
                index + 1,
                len(sweep.betas),
                beta,
                replicate,
            )

            predictions = _regression_predictions(train, test)
            fits: Dict[str, PosteriorSamples] = {}
            priors = LeakagePriors.from_truth(params)
            sampler_seed = config.derived_seed(SWEEP_KEY, replicate, index, SAMPLER_KEY)
            variants = (("leakage", priors), ("leakage_no_x", priors.without_covariates()))
            for model, model_priors in variants:
                predictions[model], fits[model] = _leakage_prediction(
                    config, train, test, model_priors, sampler_seed
                )
                posteriors.append(
                    _with_keys(posterior_summary(fits[model]), {**base, "model": model})
                )
            for model in ("simple", "complex", "leakage", "leakage_no_x", "oracle"):
                rows.extend(
                    _metric_rows(
                        base, model, test.u1, predictions[model], test.x, fits.get(model)
                    )
                )
    return SweepResult(
        metrics=pd.DataFrame(rows), posterior=pd.concat(posteriors, ignore_index=True)
    )


def misspec_sweep(config: ExperimentConfig) -> SweepResult:
    """Leakage-model accuracy when one strong prior is centered at ``m`` times the truth.

    All factors within a replicate share the same simulated data.
    """

    sem, misspec = config.sem, config.misspec
    params = standardize_sem(misspec.beta, sem.alpha, misspec.gamma, sem.eta)
    rows: List[Dict[str, object]] = []
    posteriors: List[pd.DataFrame] = []
    for replicate in range(misspec.replicates):
        seed = config.derived_seed(MISSPEC_KEY, replicate)
        train, test = _split(params, misspec.n, seed)
        for index, m in enumerate(misspec.factors):
            log.info("misspecification %s x %.2f (replicate %d)", misspec.which, m, replicate)
            priors = misspecify_priors(params, m, misspec.which)
            sampler_seed = config.derived_seed(MISSPEC_KEY, replicate, index, SAMPLER_KEY)
            pred, samples = _leakage_prediction(config, train, test, priors, sampler_seed)
            base = {
                "sweep_index": index,
                "replicate": replicate,
                "m": m,
                "which": misspec.which,
                "seed": seed,
            }
            rows.extend(_metric_rows(base, "leakage", test.u1, pred, test.x, samples))
            posteriors.append(_with_keys(posterior_summary(samples), base))
    return SweepResult(
        metrics=pd.DataFrame(rows), posterior=pd.concat(posteriors, ignore_index=True)
    )


# --- diagnosis data ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiabetesResult:
    spec: ThresholdSpec
    reports: Dict[str, MetricsReport]
    curves: Dict[Tuple[str, str], CalibrationCurve]
    predictions: pd.DataFrame
    posterior: pd.DataFrame
    evaluated_on: str

    @property
    def table(self) -> pd.DataFrame:
        return metrics_table(self.reports)

    def calibration_frame(self) -> pd.DataFrame:
        frames = []
        for (model, group), curve in self.curves.items():
            frame = _with_keys(curve.to_frame(), {"model": model, "group": group})
            frame.insert(2, "bin", np.arange(len(frame)))
            frames.append(frame)
        if not frames:
            columns = ["model", "group", "bin", "mean_predicted", "observed_rate", "count"]
            return pd.DataFrame(columns=columns)
        return pd.concat(frames, ignore_index=True)


def resolve_spec(config: ExperimentConfig) -> ThresholdSpec:
    """Thresholds from ``diabetes.spec_path`` if set, else calibrated from the configured rates."""

    settings = config.diabetes
    if settings.spec_path is not None:
        return ThresholdSpec.load(settings.spec_path)
    return calibrate_spec(settings.total_rate, settings.shares, settings.e_scale)


def _two_groups(spec: ThresholdSpec) -> Tuple[str, str]:
    if len(spec.groups) != 2:
        raise ThresholdError(f"expected two groups in the threshold spec, got {list(spec.groups)}")
    return spec.groups[0], spec.groups[1]


def _synthetic_split(
    config: ExperimentConfig, spec: ThresholdSpec
) -> Tuple[ThresholdDataset, ThresholdDataset, str]:
    settings = config.diabetes
    covariates = CovariateSpec(
        uninsured_rate=settings.uninsured_rate,
        n_continuous=len(settings.coefs) - 2,
        group_in_design=True,
        group_labels=_two_groups(spec),
    )
    seed = config.derived_seed(DIABETES_KEY)
    train, test = (
        simulate_threshold_dgp(settings.coefs, spec, settings.n, seed, covariates, stream=stream)
        for stream in (TRAIN_STREAM, TEST_STREAM)
    )
    return train, test, covariates.column_names[1]


def _file_split(
    config: ExperimentConfig, spec: ThresholdSpec
) -> Tuple[ThresholdDataset, ThresholdDataset, str]:
    settings = config.diabetes
    if settings.data_path is None or settings.schema_path is None:
        raise DatasetError("real-data mode needs both a data file and a schema file")
    schema = load_schema(settings.schema_path)
    if not schema.group:
        raise DatasetError(
            f"{settings.schema_path}: the schema must declare the insurance group column"
        )
    if not schema.group_labels:
        insured, uninsured = _two_groups(spec)
        schema = replace(schema, group_labels={"0": insured, "1": uninsured})
    data = load_csv(settings.data_path, schema).to_threshold_dataset(include_group=True)

    rng = rng_for(config.derived_seed(DIABETES_KEY), TEST_STREAM)
    order = rng.permutation(data.n)
    cut = int(round(data.n * (1.0 - settings.test_fraction)))
    return data.subset(np.sort(order[:cut])), data.subset(np.sort(order[cut:])), schema.group


def diabetes(config: ExperimentConfig, spec: Optional[ThresholdSpec] = None) -> DiabetesResult:
    """Simple, complex and oracle logistic regressions against the threshold model.

    Reports are computed on a held-out split against the true status when it
    is known, otherwise against the diagnosis proxy. ``measurement`` uses the
    marginal risk, ``measurement_given_diagnosis`` also conditions on the
    observed diagnosis.
    """

    settings = config.diabetes
    spec = spec or resolve_spec(config)
    if settings.synthetic:
        train, test, group_column = _synthetic_split(config, spec)
    else:
        train, test, group_column = _file_split(config, spec)
    log.info("Diagnosis data: %d train rows, %d test rows", train.n, test.n)

    probabilities: Dict[str, np.ndarray] = {}
    without_group = train.without_columns([group_column])
    simple = logistic_fit(without_group.X, without_group.y)
    probabilities["simple"] = simple.predict_proba(test.without_columns([group_column]).X)
    probabilities["complex"] = logistic_fit(train.X, train.y).predict_proba(test.X)

    samples = _gated_fit(
        lambda sconf: fit_threshold(train, spec, None, sconf, require_convergence=False),
        config,
        config.derived_seed(DIABETES_KEY, SAMPLER_KEY),
        "threshold fit",
    )
    risk = predict_risk(samples, test.X, test.group, test.y, spec, max_draws=settings.max_draws)
    probabilities["measurement"] = risk.p_marginal
    probabilities["measurement_given_diagnosis"] = risk.p_true

    if train.u3 is not None and test.u3 is not None:
        probabilities["oracle"] = logistic_fit(train.X, train.u3).predict_proba(test.X)
        target, evaluated_on = test.u3, "truth"
    else:
        log.warning("No true-status column; evaluating against the diagnosis proxy")
        target, evaluated_on = test.y, "proxy"

    reports = {
        model: evaluate_binary(target, q, settings.decision_threshold, settings.n_bins)
        for model, q in probabilities.items()
    }
    curves = {}
    for model, q in probabilities.items():
        for group in spec.groups:
            mask = test.group == group
            if np.count_nonzero(mask) >= settings.n_bins:
                curves[(model, group)] = calibration_curve(target[mask], q[mask], settings.n_bins)

    return DiabetesResult(
        spec=spec,
        reports=reports,
        curves=curves,
        predictions=risk.to_frame(test.group, test.y),
        posterior=samples.summary(),
        evaluated_on=evaluated_on,
    )


def calibrate(
    total_rate: float,
    shares_by_group: Mapping[str, float],
    *,
    e_scale: float = 0.1,
    n: int = CALIBRATION_CHECK_N,
    seed: int = 0,
) -> Tuple[ThresholdSpec, pd.DataFrame]:
    """Solve the base rate and thresholds, then check them by simulation."""

    spec = calibrate_spec(total_rate, shares_by_group, e_scale)
    return spec, check_calibration(spec, n, seed, targets=shares_by_group)
