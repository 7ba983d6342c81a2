"""Flat ``key = value`` simulation config.

Keys (defaults in brackets)::

    nodes [5]                 cluster size, platform ids n1..nN
    vendors [A,A,B,B,C]       vendor per node, comma separated
    domains [d1,...,dN]       failure domain per node
    seed [0]                  master seed
    tick_limit [10000]
    delay_min [1]  delay_max [5]   link delay bounds in ticks
    drop_rate [0]             probability a frame is lost
    partition []              e.g. ``n1,n2|n3,n4,n5@1000-3000``
    election_min [150]  election_max [300]  heartbeat [50]  window [20]
    drift_threshold [0.10]  comm_threshold [0.15]  max_batch [64]
    rotation_interval [4000]
    workload [12]             number of client transactions
    workload_start [600]  workload_interval [300]
    gateway [n1]              node whose platform fronts the client channel
    scenario [none]           one of S1 I1 I3 I4 E1 E2 T2 T3 D1 S2
    mutation [false]          disable the scenario's mitigation
    target [n5]  drift [1.5]  corruption [0.30]
    destroy_domain [d5]  destroy_tick [2500]  attack_tick [2000]

Thresholds accept ``inf``.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

from ..consensus import Timing

SCENARIO_IDS = ("S1", "I1", "I3", "I4", "E1", "E2", "T2", "T3", "D1", "S2")


class ConfigError(ValueError):
    code = "invalid-config"


@dataclass(frozen=True)
class Partition:
    groups: tuple[tuple[str, ...], ...]
    start: int
    end: int

    def separates(self, a: str, b: str, tick: int) -> bool:
        if not self.start <= tick < self.end:
            return False
        for g in self.groups:
            if a in g:
                return b not in g
        return False

    def __str__(self) -> str:
        return "|".join(",".join(g) for g in self.groups) + f"@{self.start}-{self.end}"

    @classmethod
    def parse(cls, text: str) -> "Partition":
        try:
            spec, window = text.split("@")
            start, end = (int(x) for x in window.split("-"))
            groups = tuple(tuple(p.strip() for p in g.split(",") if p.strip()) for g in spec.split("|"))
        except ValueError:
            raise ConfigError(f"bad partition {text!r}") from None
        if len(groups) < 2 or start > end:
            raise ConfigError(f"bad partition {text!r}")
        return cls(groups, start, end)


@dataclass(frozen=True)
class SimConfig:
    nodes: int = 5
    vendors: tuple[str, ...] = ("A", "A", "B", "B", "C")
    domains: tuple[str, ...] = ()
    seed: int = 0
    tick_limit: int = 10_000
    delay_min: int = 1
    delay_max: int = 5
    drop_rate: float = 0.0
    partition: Partition | None = None
    timing: Timing = field(default_factory=Timing)
    workload: int = 12
    workload_start: int = 600
    workload_interval: int = 300
    gateway: str = "n1"
    scenario: str = "none"
    mutation: bool = False
    target: str = "n5"
    drift: float = 1.5
    corruption: float = 0.30
    destroy_domain: str = "d5"
    destroy_tick: int = 2500
    attack_tick: int = 2000

    def __post_init__(self) -> None:
        if not self.domains:
            object.__setattr__(self, "domains", tuple(f"d{i + 1}" for i in range(self.nodes)))
        if self.nodes < 1:
            raise ConfigError("nodes must be positive")
        if len(self.vendors) != self.nodes or len(self.domains) != self.nodes:
            raise ConfigError("vendors and domains need one entry per node")
        if not 1 <= self.delay_min <= self.delay_max:
            raise ConfigError("need 1 <= delay_min <= delay_max")
        if not 0 <= self.drop_rate < 1 or not 0 <= self.corruption <= 1:
            raise ConfigError("rates must lie in [0, 1)")
        if self.scenario != "none" and self.scenario not in SCENARIO_IDS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.drift <= 0:
            raise ConfigError("drift must be positive")
        t = self.timing
        if not 0 < t.election_min <= t.election_max or t.heartbeat <= 0 or t.window <= 0:
            raise ConfigError("bad timing constants")
        if self.workload > len(WORKLOAD_STEPS):
            raise ConfigError(f"workload is at most {len(WORKLOAD_STEPS)} transactions")

    @property
    def platform_ids(self) -> list[str]:
        return [f"n{i + 1}" for i in range(self.nodes)]

    def with_scenario(self, scenario: str, mutation: bool = False, **overrides) -> "SimConfig":
        return replace(self, scenario=scenario, mutation=mutation, **overrides)

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "timing":
                out.update(v.to_json())
            elif f.name == "partition":
                out[f.name] = str(v) if v else ""
            elif isinstance(v, tuple):
                out[f.name] = ",".join(v)
            elif isinstance(v, float) and math.isinf(v):
                out[f.name] = "inf"
            else:
                out[f.name] = v
        out["format"] = 1
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.to_json().items()) if k != "format")


WORKLOAD_STEPS = (
    "put-a", "put-b", "run-concat", "put-a2", "run-digest", "propose",
    "approve-1", "approve-2", "grant", "get", "revoke", "run-identity",
)

_TIMING_KEYS = {f.name: f.type for f in fields(Timing)}
_CONFIG_KEYS = {f.name for f in fields(SimConfig)} - {"timing"}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def config_from_mapping(values: dict[str, str]) -> SimConfig:
    base = SimConfig()
    timing_base = Timing()
    top: dict = {}
    timing: dict = {}
    for key, raw in values.items():
        if key == "format":
            continue
        if key in _TIMING_KEYS:
            timing[key] = _coerce(key, str(raw), getattr(timing_base, key))
        elif key == "partition":
            top[key] = Partition.parse(str(raw)) if str(raw).strip() else None
        elif key in _CONFIG_KEYS:
            top[key] = _coerce(key, str(raw), getattr(base, key))
        else:
            raise ConfigError(f"unknown key {key!r}")
    if "nodes" in top:
        n = top["nodes"]
        top.setdefault("vendors", tuple((base.vendors * n)[:n]) if n != base.nodes else base.vendors)
        top.setdefault("domains", tuple(f"d{i + 1}" for i in range(n)))
    return SimConfig(timing=Timing(**timing), **top)


def parse_config(text: str) -> SimConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return config_from_mapping(values)


def config_from_json(obj: dict) -> SimConfig:
    return config_from_mapping({k: ",".join(v) if isinstance(v, list) else str(v) for k, v in obj.items()})


__all__ = [
    "SCENARIO_IDS",
    "WORKLOAD_STEPS",
    "ConfigError",
    "Partition",
    "SimConfig",
    "config_from_json",
    "config_from_mapping",
    "parse_config",
]
