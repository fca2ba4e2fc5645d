"""Scenario parameters and the flat ``section.key = value`` config format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    """Physical and experimental parameters of one simulated deployment.

    Range-valued knobs (``num_ues``, ``target_distance``, ``snr_db``) are
    inclusive ``(low, high)`` pairs and ``pilot_lengths`` is a set of choices;
    each dataset sample draws one value of each. A fixed setting is a range
    with ``low == high``.
    """

    area: tuple[float, float] = (100.0, 100.0)
    num_aps: int = 3
    antennas: int = 8
    num_ues: tuple[int, int] = (3, 9)
    pilot_lengths: tuple[int, ...] = (4, 8)
    target_distance: tuple[float, float] = (2.5, 20.0)
    carrier_ghz: float = 28.0
    rician_k: float = 10.0
    snr_db: tuple[float, float] = (0.0, 10.0)
    max_power: float = 0.2
    noise_power: float = 1e-13
    rcs_variance: float = 1.0
    radar_gain_db: float = 110.0
    radar_snapshots: int = 16
    shadow_std_db: float = 7.82
    min_link_distance: float = 1.0
    tx_ap_position: tuple[float, float] = (0.0, 50.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_aps < 2:
            raise ConfigError("need one transmitting and at least one receiving AP (num_aps >= 2)")
        if self.antennas < 1:
            raise ConfigError("antennas must be >= 1")
        lo, hi = self.num_ues
        if not 1 <= lo <= hi:
            raise ConfigError(f"num_ues range {self.num_ues} invalid")
        if not self.pilot_lengths or min(self.pilot_lengths) < 1:
            raise ConfigError(f"pilot_lengths {self.pilot_lengths} invalid")
        if not 0 < self.target_distance[0] <= self.target_distance[1]:
            raise ConfigError(f"target_distance range {self.target_distance} invalid")
        if self.snr_db[0] > self.snr_db[1]:
            raise ConfigError(f"snr_db range {self.snr_db} invalid")
        for name in ("max_power", "noise_power", "carrier_ghz"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.rcs_variance < 0 or self.rician_k < 0:
            raise ConfigError("rcs_variance and rician_k must be non-negative")
        if self.radar_snapshots < self.antennas:
            raise ConfigError("radar_snapshots must be >= antennas for sensing recovery")

    @property
    def num_receive_aps(self) -> int:
        return self.num_aps - 1

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "ScenarioConfig":
        kwargs = {}
        for key, value in values.items():
            if key not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown scenario key {key!r}")
            default = cls.__dataclass_fields__[key].default
            kwargs[key] = _coerce(key, value, default)
        return cls(**kwargs)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(key: str, value, default):
    try:
        if isinstance(default, tuple):
            items = value if isinstance(value, (list, tuple)) else [value]
            kind = type(default[0])
            items = [kind(float(v)) if kind is int else kind(v) for v in items]
            if key in ("num_ues", "target_distance", "snr_db", "area", "tx_ap_position") and len(items) == 1:
                items = items * 2
            return tuple(items)
        if isinstance(default, bool):
            return str(value).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(float(value))
        return type(default)(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc


def parse_config_text(text: str) -> dict[str, dict[str, object]]:
    """Parse ``section.key = value`` lines into nested dicts.

    Values with commas become lists of strings; ``#`` starts a comment.
    """
    sections: dict[str, dict[str, object]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        lhs, rhs = (s.strip() for s in line.split("=", 1))
        if "." not in lhs:
            raise ConfigError(f"line {lineno}: key {lhs!r} lacks a section prefix")
        section, key = lhs.split(".", 1)
        value: object = [v.strip() for v in rhs.split(",")] if "," in rhs else rhs
        sections.setdefault(section, {})[key] = value
    return sections


def load_config(path) -> dict[str, dict[str, object]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Section:
    """Typed view over one config section with defaults."""

    values: dict = field(default_factory=dict)

    def get(self, key: str, default):
        if key not in self.values:
            return default
        return _coerce(key, self.values[key], default)


# short symbols accepted in ``scenario.*`` keys
SCENARIO_ALIASES = {
    "M": "antennas", "L": "num_aps", "U": "num_ues", "tau_p": "pilot_lengths",
    "d": "target_distance", "snr": "snr_db", "fc": "carrier_ghz", "K": "rician_k",
    "P_max": "max_power", "sigma2": "noise_power",
}


def scenario_from_section(values: dict, seed: int | None = None) -> ScenarioConfig:
    """Build a ScenarioConfig from a parsed ``scenario`` section (aliases allowed)."""
    resolved = {}
    for key, value in values.items():
        name = SCENARIO_ALIASES.get(key, key)
        if name in resolved:
            raise ConfigError(f"scenario key {name!r} given twice")
        resolved[name] = value
    if seed is not None:
        resolved["seed"] = seed
    return ScenarioConfig.from_dict(resolved)
