from __future__ import annotations

from typing import Any, Dict

import pytest

from labelbias import config as config_mod
from labelbias.sampler import SamplerConfig

FAST_SAMPLER: Dict[str, Any] = {
    "chains": 2,
    "warmup": 200,
    "draws": 200,
    "initial_step_scale": 0.1,
    "adapt_window": 50,
    "target_accept": 0.3,
    "workers": 1,
}

# full-length chains that pass the R-hat gate; used by the acceptance-level tests
CONVERGED_SAMPLER: Dict[str, Any] = {
    "chains": 4,
    "warmup": 3_000,
    "draws": 3_000,
    "adapt_window": 50,
    "workers": 1,
    "require_convergence": True,
}


@pytest.fixture
def fast_sampler() -> SamplerConfig:
    return SamplerConfig(seed=7, **FAST_SAMPLER)


@pytest.fixture
def small_config(tmp_path):
    """Factory for a validated config sized for unit tests, writing under ``tmp_path``."""

    def make(**sections: Any) -> config_mod.ExperimentConfig:
        overrides: Dict[str, Any] = {
            "out_dir": str(tmp_path / "out"),
            "sampler": {**FAST_SAMPLER, "require_convergence": False},
            "sweep": {"betas": [0.0, 0.3], "n": 500},
            "misspec": {"factors": [0.5, 1.0], "n": 500},
            "props": {"betas": [0.2], "gammas": [0.4, 1.0], "alphas": [0.0, 0.3], "n": 20_000},
            "diabetes": {"n": 4_000},
        }
        for name, values in sections.items():
            if isinstance(values, dict) and isinstance(overrides.get(name), dict):
                overrides[name] = {**overrides[name], **values}
            else:
                overrides[name] = values
        return config_mod.build(overrides)

    return make
