"""
Configuration settings for the application
"""

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings from environment variables"""

    # App Settings
    APP_NAME: str = "sfbayes"
    VERSION: str = "1.0.0"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Execution
    DEFAULT_SEED: int = 20240601
    THREADS: int = 1
    OUTPUT_DIR: str = "./output"
    PROGRESS_EVERY: int = 1000

    # Linear algebra
    KERNEL_JITTER: float = 1e-9
    MAX_JITTER_DOUBLINGS: int = 6
    FACTOR_CACHE_SIZE: int = 64

    # Basis evaluation
    ENDPOINT_TOLERANCE: float = 1e-12
    EXACT_BINOMIAL_MAX_DEGREE: int = 15

    model_config = SettingsConfigDict(
        env_prefix="SFBAYES_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )


settings = Settings()
