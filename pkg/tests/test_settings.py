import json
import logging

import pytest
import structlog
from pydantic import ValidationError

from errors import ConfigError
from observability import init_observability, run_context
from schemas import CorrelationKind, Family
from settings import CONFIG_VERSION, load_settings


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "spatialrisk.toml"
    path.write_text(
        "\n".join(
            [
                'log_level = "DEBUG"',
                "[model]",
                'family = "lognormal"',
                'correlation = "exp"',
                "[prior]",
                "a = 3.0",
                "[sampler]",
                "chains = 2",
                "seed = 17",
            ]
        )
        + "\n",
        encoding="utf-8",
    )
    return path


# --- Settings --- #


def test_defaults():
    settings = load_settings()

    assert settings.config_version == CONFIG_VERSION
    assert settings.sampler.chains == 4
    assert settings.model.family is Family.WEIBULL
    assert settings.threads == 1  # from pytest env


def test_toml_sections_are_loaded(config_file):
    settings = load_settings(config_file)

    assert settings.log_level == "DEBUG"
    assert settings.model.family is Family.LOGNORMAL
    assert settings.model.correlation is CorrelationKind.EXP
    assert settings.sampler.chains == 2
    assert settings.sampler.warmup_iters == 6000
    assert settings.model_with_prior().prior.a == 3.0


def test_environment_beats_file_and_overrides_beat_environment(config_file, monkeypatch):
    """Precedence: overrides, then environment, then the TOML file, then defaults."""
    # 1. Arrange
    monkeypatch.setenv("SPATIALRISK_SAMPLER__CHAINS", "3")

    # 2. Act
    from_env = load_settings(config_file)
    overridden = load_settings(config_file, {"sampler": {"chains": 5}})

    # 3. Assert
    assert from_env.sampler.chains == 3
    assert from_env.sampler.seed == 17
    assert overridden.sampler.chains == 5


def test_file_is_not_read_without_argument(config_file):
    load_settings(config_file)

    assert load_settings().sampler.chains == 4


def test_unsupported_config_version(tmp_path):
    path = tmp_path / "old.toml"
    path.write_text("config_version = 2\n", encoding="utf-8")

    with pytest.raises(ConfigError) as excinfo:
        load_settings(path)

    assert excinfo.value.exit_code == 3


def test_invalid_value_is_rejected():
    with pytest.raises(ValidationError):
        load_settings(overrides={"sampler": {"target_accept": 1.5}})


# --- Logging --- #


def test_json_logs_carry_run_context(capsys):
    init_observability("DEBUG", "json")
    try:
        with run_context("fit", run_id="abc123"):
            structlog.get_logger("spatialrisk.test").info("Sampling started", chains=2)
        structlog.get_logger("spatialrisk.test").info("After run")
    finally:
        init_observability("INFO", "console")

    lines = [json.loads(line) for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    inside = next(line for line in lines if line["event"] == "Sampling started")
    after = next(line for line in lines if line["event"] == "After run")
    assert inside["run_id"] == "abc123"
    assert inside["command"] == "fit"
    assert inside["chains"] == 2
    assert inside["level"] == "info"
    assert "run_id" not in after


def test_reinitialising_keeps_one_handler():
    init_observability("INFO", "console")
    init_observability("WARNING", "console")

    root = logging.getLogger()
    assert sum(getattr(h, "_spatialrisk", False) for h in root.handlers) == 1
    assert root.level == logging.WARNING
    init_observability("INFO", "console")
