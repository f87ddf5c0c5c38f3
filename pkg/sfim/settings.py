"""Environment-driven settings (``SFIM_*`` variables, optionally from ``.env``)."""

from functools import lru_cache
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class SfimSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="SFIM_", env_file=".env", extra="ignore")

    threads: Optional[int] = Field(None, ge=1)  # caps BLAS threads and worker pools
    log_level: str = "INFO"
    max_memory_mb: int = Field(4096, ge=1)
    run_slow: bool = False


@lru_cache(maxsize=1)
def get_settings() -> SfimSettings:
    return SfimSettings()
