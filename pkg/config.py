"""Configuration management for the MULTIFAC toolkit."""

import os

from dotenv import load_dotenv
from pydantic_settings import BaseSettings

# Load environment variables from .env file
load_dotenv()


class Settings(BaseSettings):
    """Process-wide defaults."""

    # Execution settings
    threads: int = int(os.getenv("MULTIFAC_THREADS", "1"))
    log_level: str = os.getenv("MULTIFAC_LOG_LEVEL", "INFO")

    # Solver defaults
    tolerance: float = 1e-8
    max_iterations: int = 500
    n_starts: int = 5
    temper_steps: int = 10
    temper_start_ratio: float = 100.0  # ramp starts at sigma / temper_start_ratio
    zero_threshold: float = 1e-6

    # EM imputation defaults
    em_max_rounds: int = 100
    em_tolerance: float = 1e-6

    # Cross-validation defaults
    cv_folds: int = 5
    cv_holdout_fraction: float = 0.1
    grid_points: int = 8
    grid_span: float = 1e3  # grid runs from sigma_max / grid_span to sigma_max
    grid_headroom: float = 1.05

    # Simulation defaults
    simulation_rank_budget: int = 20
    single_replicates: int = 100
    linked_replicates: int = 50

    # Sentry Configuration
    sentry_dsn: str = os.getenv("SENTRY_DSN", "")
    sentry_environment: str = os.getenv("SENTRY_ENVIRONMENT", "development")
    sentry_traces_sample_rate: float = float(
        os.getenv("SENTRY_TRACES_SAMPLE_RATE", "0.0")
    )

    class Config:
        env_file = ".env"
        case_sensitive = False


# Instantiate settings
settings = Settings()
