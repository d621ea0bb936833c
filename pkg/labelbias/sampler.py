"""Adaptive random-walk Metropolis over a user-supplied log-density.

Constrained parameters are sampled on an unconstrained scale; the log-Jacobian
of each transform is added to the target. The proposal covariance and scale
adapt during warmup only and are frozen for the retained draws.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import minimize

log = logging.getLogger(__name__)

LogDensity = Callable[[np.ndarray], float]

_OPTIMAL_SCALE = 2.38
_JITTER_ATTEMPTS = 50
_FD_STEP = 1e-4
# proposal scale stays within this many e-folds of its starting value
_SCALE_FLOOR = 6.0
_SCALE_CEILING = 3.0


class SamplerError(RuntimeError):
    """Base class for sampler failures."""


class NonFiniteDensityAtInit(SamplerError):
    """Raised when the log-density is not finite at the initial point."""


class AllProposalsRejected(SamplerError):
    """Raised when a chain accepts nothing after warmup."""

    def __init__(self, message: str, *, chain: int, scale: float) -> None:
        super().__init__(message)
        self.chain = chain
        self.scale = scale


class NotConverged(SamplerError):
    """Raised when a posterior fails the R-hat check; the samples are attached."""

    def __init__(self, message: str, *, samples: "PosteriorSamples") -> None:
        super().__init__(message)
        self.samples = samples


class Transform(str, Enum):
    """Map between a parameter's support and the real line."""

    IDENTITY = "identity"
    POSITIVE = "positive"
    UNIT_INTERVAL = "unit_interval"

    def to_constrained(self, z: np.ndarray) -> np.ndarray:
        if self is Transform.POSITIVE:
            return np.exp(z)
        if self is Transform.UNIT_INTERVAL:
            return np.tanh(z)
        return z

    def to_unconstrained(self, x: np.ndarray) -> np.ndarray:
        if self is Transform.POSITIVE:
            return np.log(x)
        if self is Transform.UNIT_INTERVAL:
            return np.arctanh(x)
        return x

    def log_jacobian(self, z: np.ndarray) -> np.ndarray:
        if self is Transform.POSITIVE:
            return z
        if self is Transform.UNIT_INTERVAL:
            a = np.abs(z)
            # log(1 - tanh(z)^2) without cancellation in the tails
            return 2.0 * (math.log(2.0) - a - np.log1p(np.exp(-2.0 * a)))
        return np.zeros_like(z)

    def in_support(self, x: np.ndarray) -> np.ndarray:
        if self is Transform.POSITIVE:
            return x > 0
        if self is Transform.UNIT_INTERVAL:
            return np.abs(x) < 1
        return np.isfinite(x)


class SamplerConfig(BaseModel):
    """Run length, seeding and adaptation settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    chains: int = Field(4, ge=2)
    warmup: int = Field(3000, ge=1)
    draws: int = Field(3000, ge=100)
    seed: int = Field(20240601, ge=0, lt=2**64)
    initial_step_scale: float = Field(0.1, gt=0)
    adapt_window: int = Field(100, ge=1)
    target_accept: float = Field(0.3, gt=0, lt=1)
    init_jitter: float = Field(0.1, ge=0)
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_windows(self) -> "SamplerConfig":
        if self.warmup < self.adapt_window:
            raise ValueError("warmup must be at least one adaptation window long")
        return self


@dataclass(frozen=True, eq=False)
class Chains:
    """Retained draws indexed ``[chain, iteration, parameter]`` on the constrained scale."""

    draws: np.ndarray
    accept_rate: np.ndarray
    param_names: Tuple[str, ...]
    seed: int
    support_violations: int = 0
    proposal_scale: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_chains(self) -> int:
        return int(self.draws.shape[0])

    @property
    def n_draws(self) -> int:
        return int(self.draws.shape[1])

    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[2])

    def to_frame(self) -> pd.DataFrame:
        """One row per draw: chain, iteration, then one column per parameter."""

        chains, iters, _ = self.draws.shape
        frame = pd.DataFrame(self.flat(), columns=list(self.param_names))
        frame.insert(0, "iteration", np.tile(np.arange(iters), chains))
        frame.insert(0, "chain", np.repeat(np.arange(chains), iters))
        return frame


@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    """Chains plus diagnostics; parameters pinned by point-mass priors live in ``fixed``."""

    chains: Chains
    rhat: Dict[str, float]
    ess: Dict[str, float]
    fixed: Dict[str, float] = field(default_factory=dict)
    rhat_limit: float = 1.05

    @property
    def converged(self) -> bool:
        return all(value < self.rhat_limit for value in self.rhat.values())

    @property
    def names(self) -> Tuple[str, ...]:
        return self.chains.param_names + tuple(self.fixed)

    def param(self, name: str) -> np.ndarray:
        """Flat draws of ``name`` (a constant column for fixed parameters)."""

        if name in self.fixed:
            return np.full(self.chains.n_chains * self.chains.n_draws, self.fixed[name])
        index = self.chains.param_names.index(name)
        return self.chains.draws[:, :, index].reshape(-1)

    def mean(self, name: str) -> float:
        return float(np.mean(self.param(name)))

    @property
    def max_rhat(self) -> Tuple[str, float]:
        """Sampled parameter with the largest R-hat, and the value (NaN when nothing is sampled)."""

        if not self.rhat:
            return "", math.nan
        name = max(self.rhat, key=self.rhat.__getitem__)
        return name, self.rhat[name]

    @property
    def min_ess(self) -> Tuple[str, float]:
        if not self.ess:
            return "", math.nan
        name = min(self.ess, key=self.ess.__getitem__)
        return name, self.ess[name]

    def summary(self) -> pd.DataFrame:
        rows = []
        for name in self.names:
            values = self.param(name)
            rows.append(
                {
                    "parameter": name,
                    "mean": float(np.mean(values)),
                    "sd": float(np.std(values, ddof=1)) if values.size > 1 else 0.0,
                    "rhat": self.rhat.get(name, 1.0),
                    "ess": self.ess.get(name, float(values.size)),
                }
            )
        return pd.DataFrame(rows)

    def to_frame(self) -> pd.DataFrame:
        frame = self.chains.to_frame()
        for name, value in self.fixed.items():
            frame[name] = value
        return frame


class _Target:
    """Log-density on the unconstrained scale, Jacobian included."""

    def __init__(self, logdensity: LogDensity, transforms: Sequence[Transform]) -> None:
        self.logdensity = logdensity
        self.transforms = tuple(transforms)

    def constrain(self, z: np.ndarray) -> np.ndarray:
        return np.array([t.to_constrained(v) for t, v in zip(self.transforms, z)], dtype=float)

    def unconstrain(self, x: np.ndarray) -> np.ndarray:
        return np.array([t.to_unconstrained(v) for t, v in zip(self.transforms, x)], dtype=float)

    def in_support(self, x: np.ndarray) -> bool:
        return all(bool(t.in_support(v)) for t, v in zip(self.transforms, x))

    def __call__(self, z: np.ndarray) -> float:
        x = self.constrain(z)
        if not self.in_support(x):
            return -np.inf
        try:
            value = float(self.logdensity(x))
        except (ValueError, ArithmeticError):
            return -np.inf
        if not np.isfinite(value):
            return -np.inf
        return value + float(sum(t.log_jacobian(v) for t, v in zip(self.transforms, z)))


def _resolve_transforms(
    init: np.ndarray, transforms: Optional[Sequence[Transform]]
) -> List[Transform]:
    if transforms is None:
        return [Transform.IDENTITY] * init.size
    if len(transforms) != init.size:
        raise ValueError("one transform per parameter is required")
    return [Transform(t) for t in transforms]


def _cholesky(cov: np.ndarray) -> Optional[np.ndarray]:
    cov = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(cov + 1e-12 * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        return None


def _steps(z: np.ndarray) -> np.ndarray:
    return _FD_STEP * np.maximum(1.0, np.abs(z))


def _gradient(f: Callable[[np.ndarray], float], z: np.ndarray) -> np.ndarray:
    h = _steps(z)
    grad = np.empty(z.size)
    for i in range(z.size):
        e = np.zeros(z.size)
        e[i] = h[i]
        grad[i] = (f(z + e) - f(z - e)) / (2.0 * h[i])
    return grad


def _hessian(f: Callable[[np.ndarray], float], z: np.ndarray) -> np.ndarray:
    """Central finite-difference Hessian of ``f`` at ``z``."""

    d = z.size
    h = _steps(z)
    f0 = f(z)
    hess = np.empty((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        hess[i, i] = (f(z + ei) - 2.0 * f0 + f(z - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h[j]
            value = (f(z + ei + ej) - f(z + ei - ej) - f(z - ei + ej) + f(z - ei - ej)) / (
                4.0 * h[i] * h[j]
            )
            hess[i, j] = hess[j, i] = value
    return hess


def _laplace_covariance(target: _Target, z: np.ndarray) -> Optional[np.ndarray]:
    hess = _hessian(target, z)
    if not np.all(np.isfinite(hess)):
        return None
    precision = -0.5 * (hess + hess.T)
    if np.min(np.linalg.eigvalsh(precision)) <= 0:
        return None
    return np.linalg.inv(precision)


def _newton_polish(target: _Target, z: np.ndarray, max_iter: int = 20) -> np.ndarray:
    """Newton steps with halving from a BFGS end point; only improvements are kept."""

    lp = target(z)
    for _ in range(max_iter):
        cov = _laplace_covariance(target, z)
        if cov is None:
            break
        step = cov @ _gradient(target, z)
        if not np.all(np.isfinite(step)):
            break
        for _ in range(12):
            candidate = z + step
            lp_candidate = target(candidate)
            if np.isfinite(lp_candidate) and lp_candidate >= lp:
                break
            step = 0.5 * step
        else:
            break
        z, lp = candidate, lp_candidate
        if np.max(np.abs(step)) < 1e-9:
            break
    return z


def find_mode(
    logdensity: LogDensity,
    init: Sequence[float],
    transforms: Optional[Sequence[Transform]] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Maximize the Jacobian-adjusted target with BFGS, then polish with Newton steps.

    Returns the mode on the constrained scale and the Laplace covariance (the
    inverse of the negated finite-difference Hessian) on the unconstrained
    scale. Falls back to the BFGS inverse Hessian, and then to ``None``, when
    the curvature is not positive definite.
    """

    init = np.asarray(init, dtype=float)
    target = _Target(logdensity, _resolve_transforms(init, transforms))
    z0 = target.unconstrain(init)
    lp0 = target(z0)
    if not np.isfinite(lp0):
        raise NonFiniteDensityAtInit("log-density is not finite at the initial point")
    # unit-order objective so the first BFGS step stays local
    scale = max(1.0, abs(lp0))

    def objective(z: np.ndarray) -> float:
        value = target(z)
        return -value / scale if np.isfinite(value) else 1e300

    result = minimize(objective, z0, method="BFGS")
    z_mode = result.x if np.isfinite(target(result.x)) and target(result.x) >= lp0 else z0
    z_mode = _newton_polish(target, z_mode)

    cov = _laplace_covariance(target, z_mode)
    if cov is None:
        hess_inv = getattr(result, "hess_inv", None)
        if hess_inv is not None and _cholesky(scale * np.asarray(hess_inv)) is not None:
            cov = scale * np.asarray(hess_inv)
    log.debug(
        "Mode search finished: success=%s, nit=%s, laplace=%s",
        result.success,
        result.nit,
        cov is not None,
    )
    return target.constrain(z_mode), cov


def _run_chain(
    index: int,
    target: _Target,
    z_init: np.ndarray,
    proposal_cov: Optional[np.ndarray],
    config: SamplerConfig,
    seed_seq: np.random.SeedSequence,
) -> Tuple[np.ndarray, float, int, float]:
    rng = np.random.default_rng(seed_seq)
    d = z_init.size

    chol = None if proposal_cov is None else _cholesky(proposal_cov)
    shaped = chol is not None

    # start from a draw of the Laplace approximation when one is available
    z = z_init
    for _ in range(_JITTER_ATTEMPTS):
        noise = rng.standard_normal(d)
        offset = chol @ noise if shaped else config.init_jitter * noise
        candidate = z_init + offset
        if np.isfinite(target(candidate)):
            z = candidate
            break
    lp = target(z)

    if chol is None:
        chol = config.initial_step_scale * np.eye(d)
        log_scale = 0.0
    else:
        log_scale = math.log(_OPTIMAL_SCALE / math.sqrt(d))
    floor, ceiling = log_scale - _SCALE_FLOOR, log_scale + _SCALE_CEILING
    min_moves = max(10, 2 * d)

    history = np.empty((config.warmup, d))
    moved = np.zeros(config.warmup, dtype=bool)
    for t in range(config.warmup):
        proposal = z + math.exp(log_scale) * (chol @ rng.standard_normal(d))
        lp_proposal = target(proposal)
        log_alpha = lp_proposal - lp if np.isfinite(lp_proposal) else -np.inf
        if math.log(rng.random()) < log_alpha:
            z, lp = proposal, lp_proposal
            moved[t] = True
        accept_prob = math.exp(min(0.0, log_alpha)) if np.isfinite(log_alpha) else 0.0
        log_scale += (accept_prob - config.target_accept) / (t + 1) ** 0.6
        log_scale = min(max(log_scale, floor), ceiling)
        history[t] = z

        done = t + 1
        if done % config.adapt_window == 0 and done >= 2 * min(config.adapt_window, 50):
            # covariance is re-estimated only from windows with enough moves
            if np.count_nonzero(moved[done // 2 : done]) < min_moves:
                continue
            window = history[done // 2 : done]
            empirical = np.atleast_2d(np.cov(window, rowvar=False))
            if np.all(np.isfinite(empirical)) and np.trace(empirical) > 1e-14:
                updated = _cholesky(empirical)
                if updated is not None:
                    chol = updated
                    if not shaped:
                        log_scale = math.log(_OPTIMAL_SCALE / math.sqrt(d))
                        floor, ceiling = log_scale - _SCALE_FLOOR, log_scale + _SCALE_CEILING
                        shaped = True

    scale = math.exp(log_scale)
    draws = np.empty((config.draws, d))
    accepted = 0
    violations = 0
    for t in range(config.draws):
        proposal = z + scale * (chol @ rng.standard_normal(d))
        lp_proposal = target(proposal)
        if np.isfinite(lp_proposal) and math.log(rng.random()) < lp_proposal - lp:
            z, lp = proposal, lp_proposal
            accepted += 1
        x = target.constrain(z)
        if not target.in_support(x):
            violations += 1
        draws[t] = x

    if accepted == 0:
        raise AllProposalsRejected(
            f"chain {index} rejected every proposal after warmup", chain=index, scale=scale
        )
    rate = accepted / config.draws
    log.debug("Chain %d finished: accept_rate=%.3f scale=%.4g", index, rate, scale)
    return draws, rate, violations, scale


def sample_posterior(
    logdensity: LogDensity,
    init: Sequence[float],
    config: SamplerConfig,
    *,
    transforms: Optional[Sequence[Transform]] = None,
    param_names: Optional[Sequence[str]] = None,
    proposal_cov: Optional[np.ndarray] = None,
) -> Chains:
    """Run ``config.chains`` independent adaptive Metropolis chains from ``init``.

    ``proposal_cov`` (unconstrained scale) seeds the proposal shape, e.g. the
    Laplace covariance from :func:`find_mode`; each chain then starts from a
    draw of that normal approximation instead of the fixed ``init_jitter``.
    """

    init = np.asarray(init, dtype=float)
    target = _Target(logdensity, _resolve_transforms(init, transforms))
    if param_names is None:
        param_names = [f"p{i}" for i in range(init.size)]
    names = tuple(param_names)
    if len(names) != init.size:
        raise ValueError("one name per parameter is required")

    z_init = target.unconstrain(init)
    if not np.all(np.isfinite(z_init)) or not np.isfinite(target(z_init)):
        raise NonFiniteDensityAtInit("log-density is not finite at the initial point")

    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)

    def run(index: int) -> Tuple[np.ndarray, float, int, float]:
        return _run_chain(index, target, z_init, proposal_cov, config, seeds[index])

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, range(config.chains)))
    else:
        results = [run(index) for index in range(config.chains)]

    chains = Chains(
        draws=np.stack([r[0] for r in results]),
        accept_rate=np.array([r[1] for r in results]),
        param_names=names,
        seed=config.seed,
        support_violations=int(sum(r[2] for r in results)),
        proposal_scale=np.array([r[3] for r in results]),
    )
    log.info(
        "Sampled %d chains x %d draws (accept %.2f-%.2f)",
        chains.n_chains,
        chains.n_draws,
        chains.accept_rate.min(),
        chains.accept_rate.max(),
    )
    return chains


def _check_shape(chains: Chains) -> None:
    if chains.n_chains < 2 or chains.n_draws < 4:
        raise ValueError("diagnostics need at least two chains of at least four draws")


def _split_rhat(x: np.ndarray) -> float:
    half = x.shape[1] // 2
    splits = np.concatenate([x[:, :half], x[:, x.shape[1] - half :]], axis=0)
    within = float(np.mean(np.var(splits, axis=1, ddof=1)))
    between = half * float(np.var(np.mean(splits, axis=1), ddof=1))
    if within <= 0:
        return 1.0 if between <= 0 else float("inf")
    var_hat = (half - 1) / half * within + between / half
    return math.sqrt(var_hat / within)


def rhat(chains: Chains) -> np.ndarray:
    """Split R-hat per parameter."""

    _check_shape(chains)
    return np.array([_split_rhat(chains.draws[:, :, j]) for j in range(chains.draws.shape[2])])


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.shape[1]
    centered = x - x.mean(axis=1, keepdims=True)
    nfft = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centered, n=nfft, axis=1)
    return np.fft.irfft(spectrum * np.conj(spectrum), n=nfft, axis=1)[:, :n] / n


def _ess(x: np.ndarray) -> float:
    m, n = x.shape
    total = float(m * n)
    acov = _autocovariance(x)
    mean_var = float(np.mean(acov[:, 0])) * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += float(np.var(np.mean(x, axis=1), ddof=1))
    if var_plus <= 0:
        return 1.0
    rho = 1.0 - (mean_var - np.mean(acov, axis=0)) / var_plus
    rho[0] = 1.0

    # initial positive sequence of autocorrelation pairs, forced monotone
    tau_sum = 0.0
    previous = np.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if t > 0 and pair <= 0:
            break
        pair = min(pair, previous)
        previous = pair
        tau_sum += pair
    tau = -1.0 + 2.0 * tau_sum
    return total if tau <= 1.0 else total / tau


def ess(chains: Chains) -> np.ndarray:
    """Autocorrelation-based effective sample size per parameter, capped at the draw count."""

    _check_shape(chains)
    return np.array([_ess(chains.draws[:, :, j]) for j in range(chains.draws.shape[2])])


def summarize(chains: Chains, fixed: Optional[Dict[str, float]] = None) -> PosteriorSamples:
    """Attach R-hat and ESS to ``chains``."""

    names = chains.param_names
    return PosteriorSamples(
        chains=chains,
        rhat=dict(zip(names, rhat(chains).tolist())),
        ess=dict(zip(names, ess(chains).tolist())),
        fixed=dict(fixed or {}),
    )


def require_converged(samples: PosteriorSamples, strict: bool, what: str) -> PosteriorSamples:
    """Raise :class:`NotConverged` (or warn when not ``strict``) if any R-hat is over the limit.

    The message names the parameter with the worst R-hat and the one with the
    lowest effective sample size.
    """

    if samples.converged:
        return samples
    worst, rhat_value = samples.max_rhat
    slowest, ess_value = samples.min_ess
    message = (
        f"R-hat {rhat_value:.3f} for {worst} exceeds {samples.rhat_limit}; "
        f"lowest ESS {ess_value:.0f} for {slowest}"
    )
    if strict:
        raise NotConverged(f"{what}: {message}", samples=samples)
    log.warning("%s not converged: %s", what, message)
    return samples
