# =========================
# Process Settings
# =========================
# Environment-driven settings (log level, log file, thread count).
# Values are read from PROMPTPRUNE_* variables and an optional .env file next to
# the working directory, the same way deployment settings are kept out of code.

from pathlib import Path
from functools import lru_cache

from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

env_path = Path.cwd() / '.env'

# Load environment variables from .env file (no-op when absent)
load_dotenv(dotenv_path=env_path)


class Settings(BaseSettings):
    """
    Process-level knobs that do not change results.
    Anything that changes numbers belongs in RunConfig instead.
    """
    model_config = SettingsConfigDict(env_prefix="PROMPTPRUNE_", extra="ignore")

    log_level: str = "INFO"
    log_file: str = "promptprune.log"  # relative to the run's --out directory
    num_threads: int = 1  # single-threaded BLAS keeps reductions bit-reproducible
    progress: bool = True


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Return the cached process settings."""
    return Settings()
