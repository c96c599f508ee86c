#!/usr/bin/env python3
"""
common.py

Shared plumbing for the rsnl scripts.

Responsibilities:
- One logging format for every entry point
- Setting resolution: CLI value first, .env / environment second
- Ordered worker pool for per-mode and per-grid-point work
- Optional tqdm progress bars
- Float formatting for byte-stable CSV output

IMPORTANT:
Library modules never read the environment. Only the CLI calls the
resolve_* helpers.
"""

import os
import logging
from concurrent.futures import ThreadPoolExecutor

from dotenv import load_dotenv

try:
    from tqdm import tqdm
except Exception:
    tqdm = None


# ================= CONFIG =================

LOG_FORMAT = "[%(asctime)s] %(levelname)s: %(message)s"
LOG_DATEFMT = "%Y-%m-%dT%H:%M:%S%z"

FLOAT_FORMAT = ".17g"   # round-trip exact for 64-bit floats

THREADS_ENV = "RSNL_THREADS"
CONFIG_ENV = "RSNL_CONFIG"
OUT_ENV = "RSNL_OUT"
DEFAULT_OUT_DIR = "out"


# ================= LOGGING =================

def setup_logging(level=logging.INFO):
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATEFMT)


def maybe_progress(iterable, desc, enable=False, total=None):
    if enable and tqdm is not None:
        return tqdm(iterable, desc=desc, total=total)
    return iterable


# ================= ENV HELPERS =================

def resolve_setting(key, cli_value=None, default=None):
    """
    Resolve a setting using:
    1. CLI argument (if provided)
    2. .env / process environment
    3. the given default
    """
    load_dotenv(override=False)

    if cli_value not in (None, ""):
        return cli_value

    value = os.getenv(key)
    if value:
        return value

    return default


def resolve_threads(cli_value=None) -> int:
    raw = resolve_setting(THREADS_ENV, cli_value, 1)
    try:
        threads = int(raw)
    except (TypeError, ValueError):
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


def resolve_out_dir(cli_value=None) -> str:
    return os.path.abspath(resolve_setting(OUT_ENV, cli_value, DEFAULT_OUT_DIR))


# ================= WORKERS =================

def parallel_map(fn, items, threads=1):
    """
    Map fn over items, returning results in input order.

    Results never depend on scheduling: each call is independent and the
    executor's map preserves the order of `items`.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ================= FORMATTING =================

def fmt_float(x) -> str:
    return format(float(x), FLOAT_FORMAT)
