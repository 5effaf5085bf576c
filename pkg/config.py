"""
Toolkit Configuration Module

Uses Pydantic's BaseSettings for typed configuration management,
loading values from environment variables (prefix ``TOMOCAL_``) and .env files.
"""

import logging
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

TOOLKIT_VERSION = "0.1.0"


class Settings(BaseSettings):
    """Toolkit settings loaded from environment variables."""

    # Load .env file besides environment variables
    model_config = SettingsConfigDict(
        env_prefix="TOMOCAL_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # --- Reproducibility ---
    # Overrides the seed of experiment configs; a --seed flag wins over it
    SEED: Optional[int] = None

    # --- Detector Model (all lengths in cm) ---
    PIXEL_SIZE: float = 0.01
    GRID_STEP: float = 0.001
    MARKER_RADIUS: float = 0.05

    # --- Experiment Defaults ---
    N_REALIZATIONS: int = 100
    OUTPUT_DIR: str = "results"

    # --- Solver / Checker Tolerances ---
    # Relative gate on the best cross-ratio match; detection noise of 0.1 pixel
    # moves the reference rig's cross-ratios by about 0.5%
    CROSS_RATIO_TOLERANCE: float = 0.05
    DCC_ABS_TOL: float = 1e-10
    DCC_REL_TOL: float = 1e-8

    # --- Serialization ---
    FLOAT_FORMAT: str = "%.17g"

    # --- Logging ---
    LOG_LEVEL: str = "INFO"


# Instantiate settings. Pydantic automatically loads and validates.
try:
    settings = Settings()
except Exception as e:
    logger.critical(f"Failed to load toolkit settings: {e}", exc_info=True)
    raise SystemExit(f"Configuration error: {e}")

# Export the instantiated settings object for other modules to import
__all__ = ["settings", "Settings", "TOOLKIT_VERSION"]
