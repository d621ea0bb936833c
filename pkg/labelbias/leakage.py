"""Gaussian leakage measurement model for two-period proxies.

Given ``x``, the latent outcomes ``(u0, u1)`` are bivariate normal around
``x beta`` with residual sd ``sigma_u`` and correlation ``eta``; each proxy is
``y_t = x alpha + gamma u_t + sigma_y noise``. The latents are integrated out in
closed form, so the sampler only sees the five model parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .models import PriorSpec, SemDataset, SemParams
from .sampler import (
    Chains,
    NotConverged,
    PosteriorSamples,
    SamplerConfig,
    Transform,
    find_mode,
    require_converged,
    sample_posterior,
    summarize,
)

__all__ = [
    "LeakageError",
    "LeakageParams",
    "LeakagePriors",
    "NonPositiveDefiniteCovariance",
    "NotConverged",
    "ProxyMoments",
    "UnknownMode",
    "fit_leakage",
    "marginal_loglik",
    "misspecify_priors",
    "posterior_summary",
    "predict_latent",
]

log = logging.getLogger(__name__)

PARAMS: Tuple[str, ...] = ("alpha", "gamma", "beta", "eta", "sigma_y")
TRANSFORMS: Dict[str, Transform] = {
    "alpha": Transform.IDENTITY,
    "gamma": Transform.IDENTITY,
    "beta": Transform.IDENTITY,
    "eta": Transform.UNIT_INTERVAL,
    "sigma_y": Transform.POSITIVE,
}
STRONG_PRIOR_SD = 0.1
_LOG_2PI = math.log(2.0 * math.pi)


Mode = Literal["filtering", "smoothing"]


class LeakageError(ValueError):
    """Raised for invalid leakage-model inputs."""


class NonPositiveDefiniteCovariance(LeakageError):
    """Raised when the implied proxy covariance is not positive definite."""


class UnknownMode(LeakageError):
    """Raised for a prediction mode other than filtering or smoothing."""


@dataclass(frozen=True)
class LeakageParams:
    alpha: float
    gamma: float
    beta: float
    eta: float
    sigma_y: float
    sigma_u: float = 1.0

    def __post_init__(self) -> None:
        if not -1.0 < self.eta < 1.0:
            raise LeakageError(f"eta must lie in (-1, 1), got {self.eta}")
        if not self.sigma_y > 0 or not self.sigma_u > 0:
            raise LeakageError("sigma_y and sigma_u must be positive")

    @classmethod
    def from_sem(cls, params: SemParams) -> "LeakageParams":
        return cls(
            alpha=params.alpha,
            gamma=params.gamma,
            beta=params.beta,
            eta=params.eta,
            sigma_y=params.sigma_y,
            sigma_u=params.sigma_u,
        )


@dataclass(frozen=True)
class LeakagePriors:
    """Weak priors on the identifiable parameters, strong ones on beta and gamma."""

    alpha: PriorSpec = field(default_factory=lambda: PriorSpec("normal", 0.0, 1.0))
    gamma: PriorSpec = field(default_factory=lambda: PriorSpec("normal", 0.0, STRONG_PRIOR_SD))
    beta: PriorSpec = field(default_factory=lambda: PriorSpec("normal", 0.0, STRONG_PRIOR_SD))
    eta: PriorSpec = field(default_factory=lambda: PriorSpec("normal", 0.0, 0.2))
    sigma_y: PriorSpec = field(default_factory=lambda: PriorSpec("half_normal", 0.0, 1.0))
    sigma_u: float = 1.0

    @classmethod
    def from_truth(cls, params: SemParams) -> "LeakagePriors":
        return cls(
            gamma=PriorSpec("normal", params.gamma, STRONG_PRIOR_SD),
            beta=PriorSpec("normal", params.beta, STRONG_PRIOR_SD),
            sigma_u=params.sigma_u,
        )

    def without_covariates(self) -> "LeakagePriors":
        """Drop the neighborhood: alpha and beta pinned at zero, sigma_u the marginal latent sd."""

        return replace(
            self,
            alpha=PriorSpec("normal", 0.0, 0.0),
            beta=PriorSpec("normal", 0.0, 0.0),
            sigma_u=math.sqrt(self.sigma_u**2 + self.beta.loc**2),
        )

    def spec(self, name: str) -> PriorSpec:
        return getattr(self, name)


def misspecify_priors(
    true_params: SemParams, m: float, which: Literal["beta", "gamma"]
) -> LeakagePriors:
    """Correct priors except the center of ``which``, moved to ``m`` times its true value."""

    if not m > 0:
        raise LeakageError("misspecification factor must be positive")
    if which not in ("beta", "gamma"):
        raise LeakageError(f"can only misspecify beta or gamma, not {which!r}")
    priors = LeakagePriors.from_truth(true_params)
    center = m * getattr(true_params, which)
    return replace(priors, **{which: PriorSpec("normal", center, STRONG_PRIOR_SD)})


def _proxy_covariance(params: LeakageParams) -> Tuple[float, float]:
    """Diagonal and off-diagonal of Cov(y0, y1 | x)."""

    latent = params.gamma**2 * params.sigma_u**2
    return latent + params.sigma_y**2, latent * params.eta


@dataclass(frozen=True)
class ProxyMoments:
    """Cross products of ``(x, y0, y1)``; the leakage likelihood depends on nothing else."""

    n: int
    xx: float
    x0: float
    x1: float
    y00: float
    y11: float
    y01: float

    @classmethod
    def from_data(cls, data: SemDataset) -> "ProxyMoments":
        x, y0, y1 = data.x, data.y0, data.y1
        return cls(
            n=data.n,
            xx=float(x @ x),
            x0=float(x @ y0),
            x1=float(x @ y1),
            y00=float(y0 @ y0),
            y11=float(y1 @ y1),
            y01=float(y0 @ y1),
        )

    def residual_products(self, slope: float) -> Tuple[float, float, float]:
        """Sums of ``d0^2``, ``d1^2`` and ``d0 d1`` for ``d_t = y_t - slope x``."""

        s2 = slope * slope * self.xx
        return (
            self.y00 - 2.0 * slope * self.x0 + s2,
            self.y11 - 2.0 * slope * self.x1 + s2,
            self.y01 - slope * (self.x0 + self.x1) + s2,
        )


def marginal_loglik(params: LeakageParams, data: Union[SemDataset, ProxyMoments]) -> float:
    """Sum over rows of the bivariate normal log-density of ``(y0, y1)`` given ``x``."""

    var, cov = _proxy_covariance(params)
    det = var * var - cov * cov
    if not var > 0 or not det > 0:
        raise NonPositiveDefiniteCovariance(f"proxy covariance is singular (det={det:.3g})")
    moments = data if isinstance(data, ProxyMoments) else ProxyMoments.from_data(data)
    d00, d11, d01 = moments.residual_products(params.alpha + params.gamma * params.beta)
    quad = (var * (d00 + d11) - 2.0 * cov * d01) / det
    return float(-moments.n * (_LOG_2PI + 0.5 * math.log(det)) - 0.5 * quad)


def _split_priors(priors: LeakagePriors) -> Tuple[Tuple[str, ...], Dict[str, float]]:
    sampled = tuple(name for name in PARAMS if not priors.spec(name).is_point_mass)
    fixed = {name: priors.spec(name).loc for name in PARAMS if priors.spec(name).is_point_mass}
    fixed["sigma_u"] = priors.sigma_u
    return sampled, fixed


def _initial_point(
    sampled: Tuple[str, ...], priors: LeakagePriors, moments: ProxyMoments
) -> np.ndarray:
    """Prior centers for gamma and beta; alpha, eta and sigma_y matched to the moments."""

    gamma, beta = priors.gamma.loc, priors.beta.loc
    slope = (moments.x0 + moments.x1) / (2.0 * moments.xx) if moments.xx > 0 else 0.0
    if "alpha" not in sampled:
        slope = priors.alpha.loc + gamma * beta
    d00, d11, d01 = moments.residual_products(slope)
    latent = (gamma * priors.sigma_u) ** 2
    eta = d01 / moments.n / latent if latent > 0 else priors.eta.loc
    start = {
        "alpha": slope - gamma * beta if "alpha" in sampled else priors.alpha.loc,
        "gamma": gamma,
        "beta": beta,
        "eta": float(np.clip(eta, -0.9, 0.9)),
        "sigma_y": math.sqrt(max((d00 + d11) / (2.0 * moments.n) - latent, 0.05)),
    }
    return np.array([start[name] for name in sampled])


def fit_leakage(
    data: SemDataset,
    priors: LeakagePriors,
    sconf: SamplerConfig,
    *,
    require_convergence: bool = True,
) -> PosteriorSamples:
    """Posterior over the leakage parameters by adaptive Metropolis."""

    if data is None or data.n < 2:
        raise LeakageError("leakage fit needs at least two rows")
    sampled, fixed = _split_priors(priors)
    moments = ProxyMoments.from_data(data)

    if not sampled:
        return point_posterior(LeakageParams(**fixed), seed=sconf.seed)

    def log_posterior(theta: np.ndarray) -> float:
        values = dict(fixed)
        values.update(zip(sampled, theta.tolist()))
        params = LeakageParams(**values)
        prior = sum(priors.spec(name).logpdf(values[name]) for name in sampled)
        return marginal_loglik(params, moments) + prior

    transforms = [TRANSFORMS[name] for name in sampled]
    init = _initial_point(sampled, priors, moments)
    mode, cov = find_mode(log_posterior, init, transforms)
    log.info("Leakage posterior mode: %s", dict(zip(sampled, np.round(mode, 4).tolist())))

    chains = sample_posterior(
        log_posterior,
        mode,
        sconf,
        transforms=transforms,
        param_names=sampled,
        proposal_cov=cov,
    )
    return require_converged(summarize(chains, fixed), require_convergence, "leakage fit")


def point_posterior(params: LeakageParams, seed: int = 0) -> PosteriorSamples:
    """A degenerate posterior holding ``params`` exactly."""

    chains = Chains(
        draws=np.zeros((1, 1, 0)),
        accept_rate=np.ones(1),
        param_names=(),
        seed=seed,
    )
    fixed = {name: float(getattr(params, name)) for name in (*PARAMS, "sigma_u")}
    return PosteriorSamples(chains=chains, rhat={}, ess={}, fixed=fixed)


@dataclass(frozen=True, eq=False)
class LatentPrediction:
    mean: np.ndarray
    sd: np.ndarray


def _draw_gains(samples: PosteriorSamples, mode: Mode) -> Tuple[np.ndarray, np.ndarray]:
    """Per draw, the weights on ``(x, y0[, y1])`` of E[u1 | ...] and the conditional variance."""

    alpha, gamma, beta, eta, sigma_y, sigma_u = (
        samples.param(name) for name in (*PARAMS, "sigma_u")
    )
    su2 = sigma_u**2
    slope = alpha + gamma * beta
    var = gamma**2 * su2 + sigma_y**2
    c0 = gamma * eta * su2

    if mode == "filtering":
        k = c0 / var
        weights = np.column_stack([beta - k * slope, k])
        cond_var = su2 - c0 * k
        return weights, cond_var

    c1 = gamma * su2
    q = gamma**2 * su2 * eta
    det = var * var - q * q
    g0 = (c0 * var - c1 * q) / det
    g1 = (c1 * var - c0 * q) / det
    weights = np.column_stack([beta - (g0 + g1) * slope, g0, g1])
    cond_var = su2 - (g0 * c0 + g1 * c1)
    return weights, cond_var


def predict_latent(
    samples: PosteriorSamples,
    x: np.ndarray,
    y0: np.ndarray,
    mode: str = "filtering",
    y1: Optional[np.ndarray] = None,
) -> LatentPrediction:
    """Posterior mean and sd of ``u1``, averaged over draws.

    Filtering conditions on ``(x, y0)``; smoothing also on ``y1``. The per-draw
    conditional mean is linear in those inputs, so the draw average and the
    law-of-total-variance spread are computed from moments of the gains.
    """

    if mode not in ("filtering", "smoothing"):
        raise UnknownMode(f"unknown prediction mode {mode!r}")
    if mode == "smoothing" and y1 is None:
        raise LeakageError("smoothing needs the contemporaneous proxy y1")

    columns = [np.asarray(x, dtype=float), np.asarray(y0, dtype=float)]
    if mode == "smoothing":
        columns.append(np.asarray(y1, dtype=float))
    z = np.column_stack(np.broadcast_arrays(*columns))

    weights, cond_var = _draw_gains(samples, mode)  # type: ignore[arg-type]
    mean_w = weights.mean(axis=0)
    if weights.shape[0] > 1:
        cov_w = np.atleast_2d(np.cov(weights, rowvar=False, bias=True))
    else:
        cov_w = np.zeros((weights.shape[1], weights.shape[1]))

    mean = z @ mean_w
    spread = np.einsum("ij,jk,ik->i", z, cov_w, z)
    sd = np.sqrt(np.maximum(float(np.mean(cond_var)) + spread, 0.0))
    return LatentPrediction(mean=mean, sd=sd)


def posterior_summary(samples: PosteriorSamples) -> pd.DataFrame:
    """Mean, sd, R-hat and ESS per leakage parameter, pinned ones included."""

    frame = samples.summary()
    frame["fixed"] = frame["parameter"].isin(list(samples.fixed))
    return frame
