# app/core/config.py
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Output
    SHMC_OUTPUT_ROOT: str = "runs"

    # Logging
    SHMC_LOG_LEVEL: str = "INFO"

    # Chain worker pool (per-config n_workers is capped by this)
    SHMC_MAX_WORKERS: int = 1

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")


settings = Settings()
