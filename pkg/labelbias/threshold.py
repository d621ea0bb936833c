"""Logistic threshold measurement model for binary diagnosis proxies.

Latent severity is ``u1 ~ logistic(X beta, 1)``; the true status is
``u1 >= 0`` and a diagnosis is recorded only when ``u1 >= tau(group) + e``
with half-normal slack ``e``. Thresholds are fixed a priori, typically from
:func:`solve_base_rate` and :func:`solve_threshold`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline
from scipy.optimize import bisect
from scipy.special import expit, log_expit, logit, logsumexp

from .models import PriorSpec, ThresholdDataset, ThresholdSpec
from .regress import NotConverged as LogisticNotConverged
from .regress import RankDeficient, logistic_fit
from .sampler import (
    Chains,
    PosteriorSamples,
    SamplerConfig,
    find_mode,
    require_converged,
    sample_posterior,
    summarize,
)
from .simdata import rng_for

log = logging.getLogger(__name__)

N_NODES = 64
# slack is integrated over [0, SLACK_SPAN * e_scale]; the half-normal tail beyond is ~2e-9
SLACK_SPAN = 6.0
# margins beyond the spline table fall back to per-row quadrature
MARGIN_LIMIT = 40.0
MARGIN_KNOTS = 4001
DEFAULT_BETA_PRIOR = PriorSpec("normal", 0.0, 2.5)
CALIBRATION_STREAM = 7


class ThresholdError(ValueError):
    """Raised for invalid threshold-model inputs."""


class UnknownGroup(ThresholdError):
    def __init__(self, groups: Sequence[str]) -> None:
        super().__init__(f"no threshold configured for group(s): {', '.join(groups)}")
        self.groups = tuple(groups)


@dataclass(frozen=True, eq=False)
class SlackQuadrature:
    """Nodes and weights with ``E[f(e)] ~= sum(weights * f(nodes))`` for half-normal ``e``."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)


@lru_cache(maxsize=16)
def slack_quadrature(e_scale: float, n_nodes: int = N_NODES) -> SlackQuadrature:
    """Gauss-Legendre rule on ``[0, SLACK_SPAN * e_scale]`` weighted by the half-normal density."""

    if not e_scale > 0:
        raise ThresholdError("e_scale must be positive")
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    half_width = 0.5 * SLACK_SPAN * e_scale
    nodes = half_width * (x + 1.0)
    density = math.sqrt(2.0 / math.pi) / e_scale * np.exp(-0.5 * (nodes / e_scale) ** 2)
    weights = w * half_width * density
    weights = weights / weights.sum()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return SlackQuadrature(nodes=nodes, weights=weights)


def row_thresholds(group: np.ndarray, spec: ThresholdSpec) -> np.ndarray:
    """Per-row ``tau`` looked up by group label."""

    codes, labels = pd.factorize(np.asarray(group, dtype=object), use_na_sentinel=False)
    names = [str(label) for label in labels]
    unknown = sorted(set(names) - set(spec.tau_by_group))
    if unknown:
        raise UnknownGroup(unknown)
    return np.array([spec.tau_by_group[name] for name in names], dtype=float)[codes]


def proxy_probability(linear: np.ndarray, tau: np.ndarray, e_scale: float) -> np.ndarray:
    """``P(y = 1 | x) = E_e[sigmoid(x beta - tau - e)]`` for each row."""

    quad = slack_quadrature(float(e_scale))
    shifted = np.asarray(linear, dtype=float)[:, None] - np.asarray(tau, dtype=float)[:, None]
    return expit(shifted - quad.nodes[None, :]) @ quad.weights


def no_diagnosis_probability(linear: np.ndarray, tau: np.ndarray, e_scale: float) -> np.ndarray:
    """``P(y = 0 | x) = E_e[sigmoid(tau + e - x beta)]``, computed directly."""

    quad = slack_quadrature(float(e_scale))
    shifted = np.asarray(tau, dtype=float)[:, None] - np.asarray(linear, dtype=float)[:, None]
    return expit(shifted + quad.nodes[None, :]) @ quad.weights


def threshold_loglik(
    beta: np.ndarray, data: ThresholdDataset, spec: ThresholdSpec, *, exact: bool = False
) -> float:
    """Bernoulli log-likelihood of the diagnoses with the slack integrated out.

    By default per-row terms come from the cached :func:`margin_table`;
    ``exact`` evaluates the quadrature for every row instead.
    """

    beta = np.asarray(beta, dtype=float)
    if beta.shape != (data.X.shape[1],):
        raise ThresholdError(f"expected {data.X.shape[1]} coefficients, got {beta.shape}")
    margin = data.X @ beta - row_thresholds(data.group, spec)
    if exact:
        return _exact_loglik(margin, data.y, spec.e_scale)
    return _loglik(margin, data.y, spec.e_scale)


def _row_loglik(margin: np.ndarray, diagnosed: bool, e_scale: float) -> np.ndarray:
    """Per-row ``log P(y | margin)`` by quadrature over the slack."""

    quad = slack_quadrature(e_scale)
    z = margin[:, None] - quad.nodes[None, :]
    if not diagnosed:
        z = -z
    return logsumexp(quad.log_weights[None, :] + log_expit(z), axis=1)


def _exact_loglik(margin: np.ndarray, y: np.ndarray, e_scale: float) -> float:
    positive = y == 1.0
    return float(
        np.sum(_row_loglik(margin[positive], True, e_scale))
        + np.sum(_row_loglik(margin[~positive], False, e_scale))
    )


@dataclass(frozen=True, eq=False)
class MarginTable:
    """Cubic splines of ``log P(y = 1)`` and ``log P(y = 0)`` in the margin ``x beta - tau``."""

    limit: float
    log_p1: CubicSpline
    log_p0: CubicSpline

    def side_loglik(self, margin: np.ndarray, diagnosed: bool, e_scale: float) -> float:
        """Summed log-probability of ``y = diagnosed`` for rows with the given margins."""

        spline = self.log_p1 if diagnosed else self.log_p0
        inside = np.abs(margin) <= self.limit
        if inside.all():
            return float(np.sum(spline(margin)))
        total = float(np.sum(spline(margin[inside])))
        return total + float(np.sum(_row_loglik(margin[~inside], diagnosed, e_scale)))


@lru_cache(maxsize=16)
def margin_table(e_scale: float) -> MarginTable:
    """Spline table for one slack scale; interpolation error is below 1e-9 per row."""

    grid = np.linspace(-MARGIN_LIMIT, MARGIN_LIMIT, MARGIN_KNOTS)
    return MarginTable(
        limit=MARGIN_LIMIT,
        log_p1=CubicSpline(grid, _row_loglik(grid, True, e_scale)),
        log_p0=CubicSpline(grid, _row_loglik(grid, False, e_scale)),
    )


def _loglik(margin: np.ndarray, y: np.ndarray, e_scale: float) -> float:
    positive = y == 1.0
    table = margin_table(e_scale)
    return table.side_loglik(margin[positive], True, e_scale) + table.side_loglik(
        margin[~positive], False, e_scale
    )


def solve_base_rate(total_rate: float) -> float:
    """Intercept ``alpha`` with ``P(logistic(alpha, 1) >= 0) = total_rate``."""

    if not 0.0 < total_rate < 1.0:
        raise ThresholdError(f"total rate must lie in (0, 1), got {total_rate}")
    return float(logit(total_rate))


def undiagnosed_share(alpha: float, tau: float) -> float:
    """``1 - P(u1 >= tau) / P(u1 >= 0)`` for ``u1 ~ logistic(alpha, 1)``, slack ignored."""

    return float(1.0 - expit(alpha - tau) / expit(alpha))


def solve_threshold(alpha: float, share: float) -> float:
    """Threshold ``tau >= 0`` that leaves ``share`` of true positives undiagnosed."""

    if not 0.0 <= share < 1.0:
        raise ThresholdError(f"undiagnosed share must lie in [0, 1), got {share}")
    if share == 0.0:
        return 0.0

    def excess(tau: float) -> float:
        return undiagnosed_share(alpha, tau) - share

    upper = 1.0
    while excess(upper) < 0:
        upper *= 2.0
    return float(bisect(excess, 0.0, upper, xtol=1e-10))


def calibrate_spec(
    total_rate: float, shares_by_group: Mapping[str, float], e_scale: float = 0.1
) -> ThresholdSpec:
    """Base-rate intercept plus one threshold per group."""

    alpha = solve_base_rate(total_rate)
    taus = {group: solve_threshold(alpha, share) for group, share in shares_by_group.items()}
    rounded = {group: round(tau, 4) for group, tau in taus.items()}
    log.info("Calibrated alpha=%.4f thresholds=%s", alpha, rounded)
    return ThresholdSpec(base_alpha=alpha, tau_by_group=taus, e_scale=e_scale)


def check_calibration(
    spec: ThresholdSpec,
    n: int,
    seed: int,
    targets: Optional[Mapping[str, float]] = None,
) -> pd.DataFrame:
    """Simulated undiagnosed share per group, with slack disabled and enabled.

    Each group gets its own intercept-only population of ``n`` people at
    ``spec.base_alpha``. The slack column is a sensitivity diagnostic: the
    thresholds are calibrated without it.
    """

    if n < 2:
        raise ThresholdError("n must be at least 2")
    rows = []
    for index, (group, tau) in enumerate(sorted(spec.tau_by_group.items())):
        rng = rng_for(seed, CALIBRATION_STREAM + index)
        u1 = spec.base_alpha + rng.logistic(0.0, 1.0, size=n)
        slack = np.abs(spec.e_scale * rng.standard_normal(n))
        positives = np.count_nonzero(u1 >= 0)
        if positives == 0:
            raise ThresholdError(f"no true positives simulated for group {group!r}")
        without = 1.0 - np.count_nonzero(u1 >= tau) / positives
        with_slack = 1.0 - np.count_nonzero(u1 >= tau + slack) / positives
        rows.append(
            {
                "group": group,
                "tau": tau,
                "target": None if targets is None else targets.get(group),
                "share_no_slack": without,
                "share_with_slack": with_slack,
                "slack_delta": with_slack - without,
            }
        )
    return pd.DataFrame(rows)


def _initial_beta(data: ThresholdDataset) -> np.ndarray:
    try:
        return logistic_fit(data.X, data.y).coeffs
    except (LogisticNotConverged, RankDeficient) as exc:
        log.warning("Logistic warm start failed (%s); starting from zeros", exc)
        return np.zeros(data.X.shape[1])


def fit_threshold(
    data: ThresholdDataset,
    spec: ThresholdSpec,
    prior_on_beta: Optional[PriorSpec] = None,
    sconf: Optional[SamplerConfig] = None,
    *,
    require_convergence: bool = True,
) -> PosteriorSamples:
    """Posterior over ``beta`` with the thresholds held fixed."""

    prior = prior_on_beta or DEFAULT_BETA_PRIOR
    sconf = sconf or SamplerConfig()
    tau = row_thresholds(data.group, spec)
    positive = data.y == 1.0
    X1, tau1 = data.X[positive], tau[positive]
    X0, tau0 = data.X[~positive], tau[~positive]
    table = margin_table(spec.e_scale)

    def log_posterior(beta: np.ndarray) -> float:
        prior_term = sum(prior.logpdf(b) for b in beta.tolist())
        return (
            table.side_loglik(X1 @ beta - tau1, True, spec.e_scale)
            + table.side_loglik(X0 @ beta - tau0, False, spec.e_scale)
            + prior_term
        )

    mode, cov = find_mode(log_posterior, _initial_beta(data))
    rounded = dict(zip(data.column_names, np.round(mode, 4).tolist()))
    log.info("Threshold posterior mode: %s", rounded)
    chains = sample_posterior(
        log_posterior,
        mode,
        sconf,
        param_names=data.column_names,
        proposal_cov=cov,
    )
    return require_converged(summarize(chains), require_convergence, "threshold fit")


def point_posterior_beta(
    coefs: Sequence[float], names: Sequence[str], seed: int = 0
) -> PosteriorSamples:
    """A degenerate posterior holding the coefficient vector ``coefs``."""

    if len(coefs) != len(names):
        raise ThresholdError("one name per coefficient is required")
    chains = Chains(draws=np.zeros((1, 1, 0)), accept_rate=np.ones(1), param_names=(), seed=seed)
    fixed = {str(name): float(value) for name, value in zip(names, coefs)}
    return PosteriorSamples(chains=chains, rhat={}, ess={}, fixed=fixed)


@dataclass(frozen=True, eq=False)
class RiskPrediction:
    """Draw-averaged risks; ``sd`` is the spread of ``p_true`` across draws."""

    p_true: np.ndarray
    p_marginal: np.ndarray
    sd: np.ndarray

    def to_frame(self, group: np.ndarray, y: Optional[np.ndarray] = None) -> pd.DataFrame:
        n = self.p_true.shape[0]
        frame = pd.DataFrame(
            {
                "row_id": np.arange(n),
                "group": np.asarray(group, dtype=object),
                "y": np.full(n, np.nan) if y is None else np.asarray(y, dtype=float),
                "p_true": self.p_true,
                "p_marginal": self.p_marginal,
                "sd": self.sd,
            }
        )
        return frame


def _thinned_draws(samples: PosteriorSamples, max_draws: int) -> np.ndarray:
    draws = np.column_stack([samples.param(name) for name in samples.names])
    if draws.shape[0] <= max_draws:
        return draws
    keep = np.unique(np.linspace(0, draws.shape[0] - 1, max_draws).round().astype(int))
    return draws[keep]


def predict_risk(
    samples: PosteriorSamples,
    X: np.ndarray,
    group: np.ndarray,
    y: Optional[np.ndarray],
    spec: ThresholdSpec,
    *,
    max_draws: int = 100,
) -> RiskPrediction:
    """Probability of the true status per row, averaged over posterior draws.

    With ``y = 1`` the true status is certain. With ``y = 0`` it is the chance
    that severity fell in ``[0, tau + e)`` given no diagnosis. Rows with no
    observed diagnosis (``y`` is ``None`` or NaN) get the marginal risk.
    """

    if max_draws < 1:
        raise ThresholdError("max_draws must be positive")
    X = np.asarray(X, dtype=float)
    tau = row_thresholds(group, spec)
    n = X.shape[0]
    observed = np.zeros(n, dtype=bool) if y is None else ~np.isnan(np.asarray(y, dtype=float))
    diagnosed = np.zeros(n, dtype=bool) if y is None else np.asarray(y, dtype=float) == 1.0
    undiagnosed = observed & ~diagnosed

    betas = _thinned_draws(samples, max_draws)
    if betas.shape[1] != X.shape[1]:
        raise ThresholdError(
            f"posterior has {betas.shape[1]} coefficients, design has {X.shape[1]}"
        )

    total_true = np.zeros(n)
    total_sq = np.zeros(n)
    total_marginal = np.zeros(n)
    for beta in betas:
        linear = X @ beta
        p_marginal = expit(linear)
        p_true = p_marginal.copy()
        p_true[diagnosed] = 1.0
        if undiagnosed.any():
            p_no_diagnosis = no_diagnosis_probability(
                linear[undiagnosed], tau[undiagnosed], spec.e_scale
            )
            ratio = expit(-linear[undiagnosed]) / np.maximum(p_no_diagnosis, 1e-300)
            p_true[undiagnosed] = np.clip(1.0 - ratio, 0.0, 1.0)
        total_true += p_true
        total_sq += p_true**2
        total_marginal += p_marginal

    count = betas.shape[0]
    mean_true = total_true / count
    variance = np.maximum(total_sq / count - mean_true**2, 0.0)
    return RiskPrediction(p_true=mean_true, p_marginal=total_marginal / count, sd=np.sqrt(variance))
