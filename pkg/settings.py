"""
Runtime configuration for Silhouette Lab.
Environment variables (optionally from a .env file) plus the numeric defaults
in data/defaults.json.
"""

import json
import os
from functools import lru_cache

# Load environment variables from .env file
from dotenv import load_dotenv
load_dotenv()

BASE_DIR = os.path.dirname(os.path.abspath(__file__))

LOG_DIR = os.getenv("USL_LOG_DIR", "logs")
DEBUG = os.getenv("USL_DEBUG", "0").lower() in ("1", "true", "yes")


def _default_threads():
    raw = os.getenv("USL_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return max(1, min(os.cpu_count() or 1, 8))


THREADS = _default_threads()


@lru_cache(maxsize=1)
def load_defaults():
    path = os.path.join(BASE_DIR, "data", "defaults.json")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def read_kv_config(path):
    """
    Read a flat key=value config file.

    Blank lines and lines starting with '#' are ignored; keys are normalised
    to snake_case so `--iters` and `iters` both work.
    """
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip().lstrip("-").replace("-", "_")
            values[key] = value.strip()
    return values
