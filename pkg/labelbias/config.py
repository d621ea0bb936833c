"""Experiment configuration: YAML/JSON overrides merged onto defaults, validated with pydantic."""

from __future__ import annotations

import hashlib
import json
import os
from copy import deepcopy
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .sampler import SamplerConfig

CONFIG_ENV_VAR = "LABELBIAS_CONFIG"

DEFAULTS: Dict[str, Any] = {
    "seed": 20240601,
    "out_dir": "results",
    "mode": "filtering",
    "sem": {"alpha": 0.4, "gamma": 0.4, "eta": 0.5},
    "sweep": {
        "betas": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        "n": 10_000,
        "replicates": 1,
    },
    "misspec": {
        "factors": [0.5, 0.75, 1.0, 1.25, 1.5],
        "which": "beta",
        "beta": 0.2,
        "gamma": 0.4,
        "n": 10_000,
        "replicates": 1,
    },
    "props": {
        "betas": [0.0, 0.2, 0.4],
        "gammas": [0.4, 0.7, 1.0],
        "alphas": [0.0, 0.3],
        "eta": 0.5,
        "n": 100_000,
        "tolerance_sigmas": 3.0,
        "identity_tolerance": 1e-8,
    },
    "diabetes": {
        "synthetic": True,
        "n": 100_000,
        "total_rate": 0.14,
        "e_scale": 0.1,
        "coefs": [-2.2, 0.3, 0.8, 0.5],
        "uninsured_rate": 0.15,
        "decision_threshold": 0.5,
        "n_bins": 10,
        "max_draws": 100,
        "spec_path": None,
        "data_path": None,
        "schema_path": None,
        "test_fraction": 0.5,
    },
    "sampler": {
        "chains": 4,
        "warmup": 3000,
        "draws": 3000,
        "initial_step_scale": 0.1,
        "adapt_window": 50,
        "target_accept": 0.3,
        "workers": 4,
        "require_convergence": True,
        "retries": 1,
    },
}


class ConfigError(ValueError):
    """Raised when a configuration file cannot be read or fails validation."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SemSettings(_Section):
    alpha: float
    gamma: float
    eta: float = Field(gt=-1, lt=1)


class SweepSettings(_Section):
    betas: List[float] = Field(min_length=1)
    n: int = Field(ge=10)
    replicates: int = Field(1, ge=1)


class MisspecSettings(_Section):
    factors: List[float] = Field(min_length=1)
    which: Literal["beta", "gamma"] = "beta"
    beta: float
    gamma: float
    n: int = Field(ge=10)
    replicates: int = Field(1, ge=1)

    @field_validator("factors")
    @classmethod
    def _positive(cls, factors: List[float]) -> List[float]:
        if any(m <= 0 for m in factors):
            raise ValueError("misspecification factors must be positive")
        return factors


class PropsSettings(_Section):
    betas: List[float] = Field(min_length=1)
    gammas: List[float] = Field(min_length=1)
    alphas: List[float] = Field(min_length=1)
    eta: float = Field(0.5, gt=-1, lt=1)
    n: int = Field(ge=10)
    tolerance_sigmas: float = Field(3.0, gt=0)
    identity_tolerance: float = Field(1e-8, gt=0)


class DiabetesSettings(_Section):
    synthetic: bool = True
    n: int = Field(ge=10)
    total_rate: float = Field(gt=0, lt=1)
    # not in DEFAULTS: a configured mapping replaces this one instead of merging into it
    shares: Dict[str, float] = Field(default_factory=lambda: {"insured": 0.16, "uninsured": 0.29})
    e_scale: float = Field(0.1, gt=0)
    coefs: List[float]
    uninsured_rate: float = Field(0.15, ge=0, le=1)
    decision_threshold: float = Field(0.5, gt=0, lt=1)
    n_bins: int = Field(10, ge=2)
    max_draws: int = Field(100, ge=1)
    spec_path: Optional[Path] = None
    data_path: Optional[Path] = None
    schema_path: Optional[Path] = None
    test_fraction: float = Field(0.5, gt=0, lt=1)

    @field_validator("shares")
    @classmethod
    def _shares_in_range(cls, shares: Dict[str, float]) -> Dict[str, float]:
        if len(shares) != 2:
            raise ValueError("exactly two groups are supported (insured, uninsured)")
        for group, share in shares.items():
            if not 0 <= share < 1:
                raise ValueError(f"undiagnosed share for {group} must lie in [0, 1)")
        return shares


class SamplerSettings(_Section):
    chains: int = Field(4, ge=2)
    warmup: int = Field(3000, ge=1)
    draws: int = Field(3000, ge=100)
    initial_step_scale: float = Field(0.1, gt=0)
    adapt_window: int = Field(50, ge=1)
    target_accept: float = Field(0.3, gt=0, lt=1)
    workers: int = Field(1, ge=1)
    # a fit that misses the R-hat gate is re-run this many times at double length
    retries: int = Field(1, ge=0)
    # false: log the miss and keep the draws instead of failing the run
    require_convergence: bool = True

    def for_seed(self, seed: int) -> SamplerConfig:
        return SamplerConfig(
            seed=seed, **self.model_dump(exclude={"retries", "require_convergence"})
        )


class ExperimentConfig(_Section):
    seed: int = Field(ge=0, lt=2**64)
    out_dir: Path
    mode: Literal["filtering", "smoothing"] = "filtering"
    sem: SemSettings
    sweep: SweepSettings
    misspec: MisspecSettings
    props: PropsSettings
    diabetes: DiabetesSettings
    sampler: SamplerSettings

    def derived_seed(self, *keys: int) -> int:
        """Deterministic 63-bit seed for a named sub-task of this run."""

        state = np.random.SeedSequence([self.seed, *keys]).generate_state(2, dtype=np.uint32)
        return int(state[0]) << 31 | int(state[1]) >> 1

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]


def _deep_update(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = _deep_update(dict(base[key]), value)
        else:
            base[key] = value
    return base


def config_path(explicit: Optional[Path] = None) -> Optional[Path]:
    """Explicit path first, then the ``LABELBIAS_CONFIG`` environment variable."""

    if explicit is not None:
        return Path(explicit)
    env_path = os.environ.get(CONFIG_ENV_VAR)
    return Path(env_path) if env_path else None


def _read(path: Path) -> Dict[str, Any]:
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return raw


def build(overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Validate ``DEFAULTS`` merged with ``overrides``."""

    merged = _deep_update(deepcopy(DEFAULTS), overrides or {})
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid config value for {field}: {first['msg']}") from exc


def load(
    path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None
) -> ExperimentConfig:
    """Defaults, then the config file (if any), then ``overrides`` (e.g. CLI flags)."""

    data: Dict[str, Any] = {}
    resolved = config_path(path)
    if resolved is not None:
        data = _read(resolved)
    return build(_deep_update(data, overrides or {}))


def save(config: ExperimentConfig, path: Path) -> None:
    """Write the effective configuration as sorted, indented JSON."""

    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True)
    path.write_text(payload + "\n", encoding="utf-8")
