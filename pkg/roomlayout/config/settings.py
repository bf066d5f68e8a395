"""
Process Settings - Environment-driven knobs for the reconstruction CLI.

Values are read once at import after loading a local .env file. Typed
algorithm parameters live in defaults.json; this module only holds the
deployment-level settings.
"""

import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# ============================================================================
# LOGGING
# ============================================================================
LOG_DIR = os.getenv("LOG_DIR", "logs")
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
LOG_TO_FILE = os.getenv("LOG_TO_FILE", "true").lower() == "true"

VALID_LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
assert LOG_LEVEL in VALID_LOG_LEVELS, \
    f"LOG_LEVEL must be one of {VALID_LOG_LEVELS}, got {LOG_LEVEL}"

# ============================================================================
# MULTI-RUN CONTROL
# ============================================================================
# Worker processes for independent runs (1 = run in-process)
ROOMLAYOUT_JOBS = int(os.getenv("ROOMLAYOUT_JOBS", "1"))
# Run r uses seed ROOMLAYOUT_BASE_SEED + r
ROOMLAYOUT_BASE_SEED = int(os.getenv("ROOMLAYOUT_BASE_SEED", "0"))
# Unset -> defaults.json qc.runs
ROOMLAYOUT_RUNS = os.getenv("ROOMLAYOUT_RUNS")


def env_overrides() -> dict:
    """Config sections overridden from the environment, in defaults.json shape."""
    overrides: dict = {}
    if ROOMLAYOUT_RUNS:
        overrides.setdefault("qc", {})["runs"] = int(ROOMLAYOUT_RUNS)
    return overrides
