# src/app/core/config.py
from pydantic_settings import BaseSettings
import os


class Settings(BaseSettings):
    # Application Configuration
    PROJECT_NAME: str = os.getenv("PROJECT_NAME", "voting-tokenizer")
    PROJECT_DESC: str = os.getenv(
        "PROJECT_DESC",
        "Voting-LFQ speech tokenizer with noise-aware consensus training",
    )
    VERSION: str = os.getenv("VERSION", "1.0.0")
    ENVIRONMENT: str = os.getenv("ENVIRONMENT", "dev")  # dev, prod, test
    DEBUG: bool = os.getenv("DEBUG", False)
    LOG_DIR_PATH: str = os.getenv("LOG_DIR_PATH", "logs/")
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_TO_CONSOLE: bool = os.getenv("LOG_TO_CONSOLE", False)

    # Execution
    DEFAULT_WORKERS: int = os.getenv("DEFAULT_WORKERS", 1)

    # Bundled fixtures (vote case-study table)
    FIXTURE_DIR: str = os.getenv(
        "FIXTURE_DIR", os.path.join(os.path.dirname(os.path.dirname(__file__)), "fixtures")
    )

    class Config:
        case_sensitive = True
        env_file = ".env"
        env_file_encoding = "utf-8"


settings = Settings()
