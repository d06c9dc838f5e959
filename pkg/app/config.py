from typing import List, Optional

from loguru import logger
from pydantic_settings import BaseSettings, SettingsConfigDict

from app import __version__


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="COPULA_", env_file=".env", env_file_encoding="utf-8")

    # Application
    app_name: str = "Copula Imputation Toolkit"
    version: str = __version__

    # Output Settings
    output_root: str = "output"                      # COPULA_OUTPUT_ROOT overrides the default output root

    # CSV Input
    missing_tokens: List[str] = ["NA", ""]

    # Chain Defaults - the simulation study setting (500 saved frames)
    default_iterations: int = 3000
    default_thin: int = 3
    default_burn_in: int = 500
    default_seed: int = 0
    default_level: float = 0.95
    default_jobs: int = 1

    # Numerical Guards
    condition_threshold: float = 1e12                # conditional_params refuses above this
    ridge: float = 1e-8                              # added to C's diagonal when the guard trips

    # Logging Configuration
    log_level: str = "INFO"
    log_file: Optional[str] = None
    log_config_details: bool = False
    log_chain_progress: bool = True
    progress_every: int = 100


def get_fresh_settings() -> Settings:
    """Settings re-read from the current environment and .env file"""
    return Settings()


def log_config(settings_instance: Settings) -> None:
    """Log the resolved settings as a banner"""
    if not settings_instance.log_config_details:
        return
    logger.info("=" * 70)
    logger.info(f"{settings_instance.app_name} v{settings_instance.version}")
    logger.info("=" * 70)
    logger.info(f"📁 Output root: {settings_instance.output_root}")
    logger.info(f"🧩 Missing tokens: {settings_instance.missing_tokens}")
    logger.info(
        f"🔁 Chain defaults: iters={settings_instance.default_iterations} "
        f"thin={settings_instance.default_thin} burn-in={settings_instance.default_burn_in} "
        f"seed={settings_instance.default_seed}"
    )
    logger.info(
        f"🛡️  Conditioning guard: threshold={settings_instance.condition_threshold:g} "
        f"ridge={settings_instance.ridge:g}"
    )
    logger.info(f"📋 Log level: {settings_instance.log_level}")
    logger.info("=" * 70)


# Create global settings instance
settings = Settings()
