from __future__ import annotations

import logging
import os
from typing import Any, Dict, Optional

import yaml

from core.errors import ConfigError


def env_bool(name: str, default: bool=False) -> bool:
    v = os.getenv(name)
    if v is None:
        return default
    return v.strip().lower() in ("1","true","yes","y","on")

def env_int(name: str, default: int) -> int:
    try:
        return int(os.getenv(name, str(default)).strip())
    except Exception:
        return default

def env_float(name: str, default: float) -> float:
    try:
        return float(os.getenv(name, str(default)).strip())
    except Exception:
        return default

def env_str(name: str, default: str) -> str:
    v = os.getenv(name)
    return v.strip() if v and v.strip() else default


# Numerics
EPSILON = env_float("MPMP_EPSILON", 1e-15)
H_LIMIT = env_float("MPMP_H_LIMIT", 1e6)  # surrogate for h -> infinity in the fluid fit
MAX_DOUBLINGS = env_int("MPMP_MAX_DOUBLINGS", 128)

# Simulation / replications
CI_TARGET = env_float("MPMP_CI_TARGET", 0.03)
MIN_REPLICATIONS = env_int("MPMP_MIN_REPLICATIONS", 2)
MAX_REPLICATIONS = env_int("MPMP_MAX_REPLICATIONS", 30)
WORKERS = env_int("MPMP_WORKERS", 1)

# Oracle
STATE_CAP = env_int("MPMP_STATE_CAP", 200_000)
RVI_TOL = env_float("MPMP_RVI_TOL", 1e-10)
RVI_MAX_ITER = env_int("MPMP_RVI_MAX_ITER", 200_000)

LOG_LEVEL = env_str("MPMP_LOG_LEVEL", "INFO")

# Seed override for CI farms; flags still win.
SEED_ENV = "MPMP_SEED"


def seed_override() -> Optional[int]:
    v = os.getenv(SEED_ENV)
    if v is None or not v.strip():
        return None
    try:
        return int(v.strip())
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {v!r}")


DEFAULTS: Dict[str, Any] = {
    "seed": 1,
    "epsilon": EPSILON,
    "h_limit": H_LIMIT,
    "ci_target": CI_TARGET,
    "min_replications": MIN_REPLICATIONS,
    "max_replications": MAX_REPLICATIONS,
    "workers": WORKERS,
    "state_cap": STATE_CAP,
    "horizon": 2000.0,
    "warmup": None,  # 10% of horizon when unset
    "sizes": "exponential",
    "tiebreak": "lltb",
    "bin_seconds": 3600.0,
    "track_z": False,
}


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return data


def resolve_settings(flags: Dict[str, Any], file_cfg: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """flags > MPMP_SEED (seed only) > config file > defaults.

    `flags` holds only the options given on the command line (None means unset).
    """
    out = dict(DEFAULTS)
    out.update(file_cfg or {})
    env_seed = seed_override()
    if env_seed is not None:
        out["seed"] = env_seed
    out.update({k: v for k, v in flags.items() if v is not None})
    if out.get("warmup") is None:
        out["warmup"] = 0.1 * float(out["horizon"])
    return out


def configure_logging(level: str = LOG_LEVEL) -> None:
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
