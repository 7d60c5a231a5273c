"""
Process-wide settings, read from the environment (and an optional .env file).
"""

import logging
import os
from os.path import dirname, join

from dotenv import load_dotenv

from radloc.logger import Logger

dotenv_path = join(dirname(__file__), ".env")
load_dotenv(dotenv_path)


def _level(name: str) -> int:
    value = logging.getLevelName(name.upper())
    return value if isinstance(value, int) else logging.WARNING


LOG_LEVEL = _level(os.environ.get("RADLOC_LOG_LEVEL", "WARNING"))

logger = Logger("radloc", LOG_LEVEL)

# Concurrency budget handed to renderer / mcl / harness when the caller passes none.
WORKERS = int(os.environ.get("RADLOC_WORKERS", 1))

# Root seed for CLI runs without --seed.
SEED = int(os.environ.get("RADLOC_SEED", 0))

# Rays per work chunk. Reductions run chunk by chunk in order, so results do not
# depend on the worker count; changing this value may change low-order bits.
CHUNK_RAYS = int(os.environ.get("RADLOC_CHUNK_RAYS", 1024))
