"""Deterministic network simulator hosting the cluster, plus the threat catalog."""

from .cluster import ClusterSetup, build_cluster
from .config import SCENARIO_IDS, ConfigError, Partition, SimConfig, config_from_json, parse_config
from .network import Simulation, run
from .scenarios import CATALOG, SafetyReport, ThreatScenario, Verdict, check, check_safety
from .trace import ReplayResult, Trace, TraceError, replay

__all__ = [
    "CATALOG",
    "SCENARIO_IDS",
    "ClusterSetup",
    "ConfigError",
    "Partition",
    "ReplayResult",
    "SafetyReport",
    "SimConfig",
    "Simulation",
    "ThreatScenario",
    "Trace",
    "TraceError",
    "Verdict",
    "build_cluster",
    "check",
    "check_safety",
    "config_from_json",
    "parse_config",
    "replay",
    "run",
]
