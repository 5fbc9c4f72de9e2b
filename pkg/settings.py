from contextvars import ContextVar
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type

from pydantic import Field
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from errors import ConfigError
from schemas import McemConfig, ModelConfig, PriorConfig, SamplerConfig, SimConfig

CONFIG_VERSION = 1

# Config file for the Settings instance being built; read by settings_customise_sources.
_config_file: ContextVar[Optional[Path]] = ContextVar("spatialrisk_config_file", default=None)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="SPATIALRISK_",
        env_nested_delimiter="__",
        env_file=(".env",),
        extra="ignore",
    )

    config_version: int = CONFIG_VERSION

    # Logging
    log_level: str = "INFO"
    log_format: str = "console"  # "json" or "console"

    # Worker cap for chains and study replicates; never changes results
    threads: int = Field(1, ge=1)
    output_dir: Path = Path("out")

    model: ModelConfig = Field(default_factory=ModelConfig)
    prior: PriorConfig = Field(default_factory=PriorConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    mcem: McemConfig = Field(default_factory=McemConfig)
    simulation: SimConfig = Field(default_factory=SimConfig)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        sources = [init_settings, env_settings, dotenv_settings]
        config_file = _config_file.get()
        if config_file is not None:
            sources.append(TomlConfigSettingsSource(settings_cls, toml_file=config_file))
        return tuple(sources)

    def model_with_prior(self) -> ModelConfig:
        """ModelConfig with the top-level [prior] section folded in."""
        return self.model.model_copy(update={"prior": self.prior})


def load_settings(
    config_file: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None
) -> Settings:
    """Build Settings from defaults, an optional TOML file, the environment and overrides.

    Overrides (typically CLI flags) win over everything else. Nested sections are
    passed as dicts, e.g. ``{"sampler": {"chains": 2}}``.
    """
    token = _config_file.set(Path(config_file) if config_file is not None else None)
    try:
        settings = Settings(**(overrides or {}))
    finally:
        _config_file.reset(token)
    if settings.config_version != CONFIG_VERSION:
        raise ConfigError(
            f"unsupported config_version {settings.config_version}; expected {CONFIG_VERSION}"
        )
    return settings


@lru_cache()
def get_settings() -> Settings:
    return load_settings()
