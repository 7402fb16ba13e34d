# =====================================================================
#  config.py — network parameters, unit conversions, config loading
# =====================================================================

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, fields, replace
from enum import Enum

from dotenv import load_dotenv

from errors import ConfigError, StorageError

log = logging.getLogger("config")

# -------------------------------------------------------------------
# 1. Environment
# -------------------------------------------------------------------
load_dotenv()

AOI_WORKERS = os.getenv("AOI_WORKERS")
AOI_LOG_LEVEL = os.getenv("AOI_LOG_LEVEL", "INFO")
AOI_CONFIG = os.getenv("AOI_CONFIG")

CODE_VERSION = "1.0.0"

# Settings used when a config file leaves a key out.
DEFAULT_NETWORK = {
    "lambda_per_m2": 1e-4,
    "link_distance_m": 15.0,
    "alpha": 3.8,
    "theta_db": 0.0,
    "tx_power_dbm": 17.0,
    "noise_dbm": -90.0,
    "access_p": 0.6,
    "xi": 0.3,
    "discipline": "fcfs",
    "area_km2": 5.0,
}

DEFAULT_SIMULATION = {
    "slots": 20000,
    "warmup_slots": None,
    "realizations": 200,
    "seed": 2021,
    "culling_radius_m": None,
    "queue_cap": 1_000_000,
    "fading": "marginal",
    "peak_sampling": "resetting",
}

FADING_MODES = ("marginal", "explicit")
PEAK_SAMPLING_MODES = ("resetting", "all")


# -------------------------------------------------------------------
# 2. Unit conversions
# -------------------------------------------------------------------
def db_to_linear(value_db):
    return 10.0 ** (value_db / 10.0)


def linear_to_db(value):
    return 10.0 * math.log10(value)


def dbm_to_watts(value_dbm):
    return 10.0 ** ((value_dbm - 30.0) / 10.0)


def watts_to_dbm(value_w):
    return 10.0 * math.log10(value_w) + 30.0


# -------------------------------------------------------------------
# 3. Domain types
# -------------------------------------------------------------------
class Discipline(str, Enum):
    FCFS = "fcfs"
    LCFS_PR = "lcfs_pr"


@dataclass(frozen=True)
class NetworkConfig:
    """Physical, traffic and protocol parameters in linear units.

    Build one through `validate()` from user input. `replace()` produces a
    copy with the derived fields (rho, delta) recomputed; it skips the range
    checks so solvers can probe limits such as lam = 0.
    """

    lam: float
    link_distance_r: float
    alpha: float
    theta: float
    tx_power: float
    noise_power: float
    rho: float
    access_p: float
    xi: float
    discipline: Discipline
    region_area: float
    delta: float

    @classmethod
    def derive(cls, *, lam, link_distance_r, alpha, theta, tx_power,
               noise_power, access_p, xi, discipline, region_area):
        return cls(
            lam=float(lam),
            link_distance_r=float(link_distance_r),
            alpha=float(alpha),
            theta=float(theta),
            tx_power=float(tx_power),
            noise_power=float(noise_power),
            rho=float(tx_power) / float(noise_power),
            access_p=float(access_p),
            xi=float(xi),
            discipline=Discipline(discipline),
            region_area=float(region_area),
            delta=2.0 / float(alpha),
        )

    def replace(self, **changes):
        base = {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in ("rho", "delta")}
        base.update(changes)
        return NetworkConfig.derive(**base)

    @property
    def theta_db(self):
        return linear_to_db(self.theta)

    @property
    def region_side(self):
        return math.sqrt(self.region_area)

    @property
    def noise_term(self):
        """theta * r^alpha / rho, the interference-free outage exponent."""
        return self.theta * self.link_distance_r ** self.alpha / self.rho

    def as_raw(self):
        """Config-file view (dB / dBm / km²) of this config."""
        return {
            "lambda_per_m2": self.lam,
            "link_distance_m": self.link_distance_r,
            "alpha": self.alpha,
            "theta_db": linear_to_db(self.theta),
            "tx_power_dbm": watts_to_dbm(self.tx_power),
            "noise_dbm": watts_to_dbm(self.noise_power),
            "access_p": self.access_p,
            "xi": self.xi,
            "discipline": self.discipline.value,
            "area_km2": self.region_area / 1e6,
        }

    def config_hash(self):
        payload = {f.name: getattr(self, f.name) for f in fields(self)}
        payload["discipline"] = self.discipline.value
        text = json.dumps(payload, sort_keys=True, default=repr)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class SimulationSettings:
    slots: int
    warmup_slots: int
    realizations: int
    seed: int
    culling_radius: float = None
    queue_cap: int = 1_000_000
    fading: str = "marginal"
    peak_sampling: str = "resetting"
    min_attempts: int = 100
    min_resets: int = 10

    def replace(self, **changes):
        # a new horizon without an explicit warmup gets the default warmup
        if "slots" in changes and "warmup_slots" not in changes:
            changes["warmup_slots"] = default_warmup(changes["slots"])
        return replace(self, **changes)


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig
    simulation: SimulationSettings


# -------------------------------------------------------------------
# 4. Validation
# -------------------------------------------------------------------
def default_warmup(slots):
    """20% of the horizon, at least 2000 slots, never more than half of it."""
    return min(max(int(0.2 * slots), 2000), int(slots) // 2)


def _number(raw, key):
    value = raw.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(key, "must be finite")
    return float(value)


def _integer(raw, key):
    value = raw.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    return value


def validate(raw):
    """Normalize a `network` section into a NetworkConfig (linear units)."""
    unknown = sorted(set(raw) - set(DEFAULT_NETWORK))
    if unknown:
        raise ConfigError(unknown[0], "unknown network key")
    merged = {**DEFAULT_NETWORK, **raw}

    alpha = _number(merged, "alpha")
    if alpha <= 2.0:
        raise ConfigError("alpha", "alpha must exceed 2")
    access_p = _number(merged, "access_p")
    if not 0.0 < access_p <= 1.0:
        raise ConfigError("access_p", "access_p must lie in (0, 1]")
    xi = _number(merged, "xi")
    if not 0.0 < xi <= 1.0:
        raise ConfigError("xi", "xi must lie in (0, 1]")
    for key in ("lambda_per_m2", "link_distance_m", "area_km2"):
        if _number(merged, key) <= 0.0:
            raise ConfigError(key, f"{key} must be positive")

    discipline = merged["discipline"]
    try:
        discipline = Discipline(str(discipline).lower())
    except ValueError:
        raise ConfigError("discipline", f"expected 'fcfs' or 'lcfs_pr', got {discipline!r}") from None

    config = NetworkConfig.derive(
        lam=_number(merged, "lambda_per_m2"),
        link_distance_r=_number(merged, "link_distance_m"),
        alpha=alpha,
        theta=db_to_linear(_number(merged, "theta_db")),
        tx_power=dbm_to_watts(_number(merged, "tx_power_dbm")),
        noise_power=dbm_to_watts(_number(merged, "noise_dbm")),
        access_p=access_p,
        xi=xi,
        discipline=discipline,
        region_area=_number(merged, "area_km2") * 1e6,
    )
    if 2.0 * config.link_distance_r >= config.region_side:
        raise ConfigError("link_distance_m", "link distance must be below half the region side")
    return config


def validate_simulation(raw):
    unknown = sorted(set(raw) - set(DEFAULT_SIMULATION))
    if unknown:
        raise ConfigError(unknown[0], "unknown simulation key")
    merged = {**DEFAULT_SIMULATION, **raw}

    slots = _integer(merged, "slots")
    if slots <= 0:
        raise ConfigError("slots", "slots must be positive")
    warmup = merged["warmup_slots"]
    warmup = default_warmup(slots) if warmup is None else _integer(merged, "warmup_slots")
    if not 0 <= warmup < slots:
        raise ConfigError("warmup_slots", "need 0 <= warmup_slots < slots")
    realizations = _integer(merged, "realizations")
    if realizations < 0:
        raise ConfigError("realizations", "realizations must be nonnegative")
    seed = _integer(merged, "seed")
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed", "seed must be an unsigned 64-bit integer")

    culling = merged["culling_radius_m"]
    if culling is not None:
        culling = _number(merged, "culling_radius_m")
    queue_cap = _integer(merged, "queue_cap")
    if queue_cap <= 0:
        raise ConfigError("queue_cap", "queue_cap must be positive")
    if merged["fading"] not in FADING_MODES:
        raise ConfigError("fading", f"expected one of {FADING_MODES}")
    if merged["peak_sampling"] not in PEAK_SAMPLING_MODES:
        raise ConfigError("peak_sampling", f"expected one of {PEAK_SAMPLING_MODES}")

    return SimulationSettings(
        slots=slots,
        warmup_slots=warmup,
        realizations=realizations,
        seed=seed,
        culling_radius=culling,
        queue_cap=queue_cap,
        fading=merged["fading"],
        peak_sampling=merged["peak_sampling"],
    )


def parse_config(document):
    if not isinstance(document, dict):
        raise ConfigError(None, "config root must be an object")
    unknown = sorted(set(document) - {"network", "simulation"})
    if unknown:
        raise ConfigError(unknown[0], "unknown section")
    return ExperimentConfig(
        network=validate(document.get("network", {})),
        simulation=validate_simulation(document.get("simulation", {})),
    )


def load_config(path=None):
    """Read a JSON config file; with no path, AOI_CONFIG or the built-in defaults."""
    path = path or AOI_CONFIG
    if not path:
        log.info("no config file given, using defaults")
        return parse_config({})
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise StorageError(f"cannot read config {path}: {e}") from e
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(None, f"{path} is not valid JSON: {e}") from e
    config = parse_config(document)
    log.info("loaded %s (hash %s)", path, config.network.config_hash())
    return config
