"""Process-level settings loaded from the environment."""

from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()


class Settings(BaseSettings):
    """Runtime settings. Every field can be overridden with an EAAS_* variable."""

    model_config = SettingsConfigDict(env_prefix="EAAS_", env_file=".env", extra="ignore")

    data_root: Path = Path("data")
    output_root: Path = Path("runs")
    log_level: str = "INFO"

    # JSON-lines server
    tcp_host: str = "0.0.0.0"
    tcp_port: int = 23000

    http_host: str = "0.0.0.0"
    http_port: int = 8000

    price_per_1000: float = Field(default=3.2, ge=0.0)
    deterministic: bool = False


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Return the cached settings instance."""
    return Settings()
