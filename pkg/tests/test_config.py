import json

import pytest

from labelbias import config as config_mod
from labelbias.config import CONFIG_ENV_VAR, ConfigError


def test_defaults_validate():
    config = config_mod.build()
    assert config.seed == 20240601
    assert config.sem.alpha == 0.4 and config.sem.eta == 0.5
    assert config.diabetes.total_rate == 0.14
    assert config.diabetes.shares == {"insured": 0.16, "uninsured": 0.29}
    assert config.props.tolerance_sigmas == 3.0


def test_overrides_merge_into_sections():
    config = config_mod.build({"sweep": {"n": 123}, "seed": 9})
    assert config.sweep.n == 123
    assert config.sweep.betas == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
    assert config.seed == 9


def test_shares_replace_rather_than_merge():
    config = config_mod.build({"diabetes": {"shares": {"north": 0.1, "south": 0.2}}})
    assert config.diabetes.shares == {"north": 0.1, "south": 0.2}


@pytest.mark.parametrize(
    "overrides,field",
    [
        ({"sem": {"eta": 1.0}}, "sem.eta"),
        ({"misspec": {"factors": [0.0, 1.0]}}, "misspec.factors"),
        ({"diabetes": {"shares": {"a": 0.1}}}, "diabetes.shares"),
        ({"sampler": {"chains": 1}}, "sampler.chains"),
        ({"unknown": 1}, "unknown"),
    ],
)
def test_invalid_values_name_the_field(overrides, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config_mod.build(overrides)


def test_load_file_then_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 5\nsweep:\n  n: 50\n  betas: [0.1]\n", encoding="utf-8")
    config = config_mod.load(path, {"sweep": {"n": 70}})
    assert config.seed == 5
    assert config.sweep.betas == [0.1]
    assert config.sweep.n == 70


def test_load_from_environment(tmp_path, monkeypatch):
    path = tmp_path / "env.json"
    path.write_text(json.dumps({"mode": "smoothing"}), encoding="utf-8")
    monkeypatch.setenv(CONFIG_ENV_VAR, str(path))
    assert config_mod.load().mode == "smoothing"
    monkeypatch.delenv(CONFIG_ENV_VAR)
    assert config_mod.load().mode == "filtering"


def test_unreadable_or_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        config_mod.load(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1, 2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid config"):
        config_mod.load(bad)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mapping"):
        config_mod.load(scalar)


def test_save_then_load_keeps_hash(tmp_path):
    config = config_mod.build({"seed": 77, "out_dir": str(tmp_path)})
    config_mod.save(config, tmp_path / "config.json")
    again = config_mod.load(tmp_path / "config.json")
    assert again.config_hash == config.config_hash
    assert config_mod.build({"seed": 78}).config_hash != config.config_hash


def test_derived_seeds():
    config = config_mod.build({"seed": 1})
    assert config.derived_seed(1, 2) == config.derived_seed(1, 2)
    assert config.derived_seed(1, 2) != config.derived_seed(2, 1)
    assert config.derived_seed(1) != config_mod.build({"seed": 2}).derived_seed(1)
    assert 0 <= config.derived_seed(3) < 2**63


def test_sampler_settings_carry_the_seed():
    sampler = config_mod.build().sampler.for_seed(123)
    assert sampler.seed == 123
    assert sampler.chains == 4
    assert (sampler.warmup, sampler.draws) == (3_000, 3_000)


def test_convergence_gate_is_on_by_default():
    settings = config_mod.build().sampler
    assert settings.require_convergence
    assert settings.retries == 1
    lenient = config_mod.build({"sampler": {"require_convergence": False, "retries": 0}})
    assert lenient.sampler.for_seed(1).draws == 3_000
    with pytest.raises(config_mod.ConfigError, match="sampler.retries"):
        config_mod.build({"sampler": {"retries": -1}})
