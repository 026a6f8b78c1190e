"""Configuration management for the platoon simulation toolkit."""

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Base paths
BASE_DIR = Path(__file__).parent.parent
CONFIG_DIR = BASE_DIR / "configs"
OUTPUT_DIR = Path(os.getenv("OUTPUT_DIR", str(BASE_DIR / "runs")))

# Run registry - SQLite next to the outputs unless a URL is given
RUN_DATABASE_URL = os.getenv("RUN_DATABASE_URL")
RUN_DATABASE_NAME = "runs.sqlite"
DB_TIMEOUT = 30  # seconds

# Sweeps
SWEEP_CAP = int(os.getenv("SWEEP_CAP", "500"))  # grid points
SWEEP_WORKERS = int(os.getenv("SWEEP_WORKERS", str(min(4, os.cpu_count() or 1))))

# Numerics
DIVERGENCE_LIMIT = float(os.getenv("DIVERGENCE_LIMIT", "1e6"))
CSV_SIGNIFICANT_DIGITS = 9
TRAJECTORY_TOLERANCE = 1e-6
EIGEN_TOLERANCE = 1e-10

# Logging
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
