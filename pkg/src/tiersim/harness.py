"""Experiment orchestration: configs, replay, metrics, sweeps, reports.

An experiment replays one workload through one policy on one device chain
and reports the latency/IOPS/eviction/preference metrics, optionally
normalized against a Fast-Only run of the same trace. Configs are plain JSON
(see CONFIG_SCHEMA); reports serialize to one CSV row each plus an optional
JSON document carrying the training loss curve.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .agent import AgentConfig, AtomSupport, SibylAgent, default_support
from .devices import (DeviceSpec, Hss, PRESETS, fast_capacity_for)
from .features import BinningConfig
from .policies import (AlwaysDevice, Cde, CdeConfig, FastOnly, Hps, HpsConfig,
                       OraclePolicy, Policy, SibylPolicy, SlowOnly,
                       TriConfig, TriHeuristic)
from .trace import (SynthKind, TraceError, Workload, load_msrc, synth_trace,
                    workload_stats)


class ConfigError(Exception):
    pass


# Descriptive schema for the JSON config format (informal jsonschema style).
CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "workload": {
            "oneOf": [
                {"type": "object", "properties": {"path": {"type": "string"}}},
                {"type": "object", "properties": {"synth": {
                    "type": "object",
                    "properties": {
                        "kind": {"enum": ["HotRandom", "ColdSequential", "Mixed"]},
                        "n": {"type": "integer", "minimum": 1},
                        "pages": {"type": "integer", "minimum": 1},
                        "seed": {"type": "integer"},
                    },
                    "required": ["kind", "n", "pages", "seed"],
                }}},
            ],
        },
        "page_size": {"type": "integer", "default": 4096},
        "hss": {
            "type": "object",
            "properties": {
                "devices": {"type": "array", "items": {"type": ["string", "object"]},
                            "minItems": 1, "maxItems": 3},
                "capacity_fractions": {
                    "type": "array",
                    "items": {"type": ["number", "null"]},
                    "description": "fraction of the working set per device; null = unbounded",
                },
            },
            "required": ["devices"],
        },
        "policy": {"type": "object", "properties": {"name": {"type": "string"}}},
        "agent": {"type": "object", "description": "AgentConfig overrides + v_min/v_max/n_atoms"},
        "seed": {"type": "integer", "default": 0},
        "jitter_sigma": {"type": "number", "default": 0.0},
        "normalize": {"type": "boolean", "default": True},
        "deterministic": {"type": "boolean", "default": True},
        "out": {"type": ["string", "null"]},
    },
    "required": ["workload", "hss", "policy"],
}


@dataclass
class ExperimentConfig:
    workload_path: Optional[str] = None
    synth: Optional[dict] = None
    page_size: int = 4096
    devices: list[Any] = field(default_factory=lambda: ["H", "M"])
    capacity_fractions: Optional[list[Optional[float]]] = None
    policy: str = "sibyl"
    policy_params: dict = field(default_factory=dict)
    agent_params: dict = field(default_factory=dict)
    seed: int = 0
    jitter_sigma: float = 0.0
    normalize: bool = True
    deterministic: bool = True
    out: Optional[str] = None

    def __post_init__(self) -> None:
        if (self.workload_path is None) == (self.synth is None):
            raise ConfigError("config needs exactly one workload source (path or synth)")
        if not 1 <= len(self.devices) <= 3:
            raise ConfigError(f"device list length must be 1-3, got {len(self.devices)}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            workload = raw["workload"]
            hss = raw["hss"]
            policy = raw["policy"]
        except KeyError as exc:
            raise ConfigError(f"missing required config key: {exc}") from None
        if not isinstance(workload, dict):
            raise ConfigError("workload must be an object")
        policy_params = {k: v for k, v in policy.items() if k != "name"}
        if "name" not in policy:
            raise ConfigError("policy.name is required")
        return cls(
            workload_path=workload.get("path"),
            synth=workload.get("synth"),
            page_size=raw.get("page_size", 4096),
            devices=list(hss.get("devices", [])),
            capacity_fractions=hss.get("capacity_fractions"),
            policy=policy["name"],
            policy_params=policy_params,
            agent_params=dict(raw.get("agent", {})),
            seed=raw.get("seed", 0),
            jitter_sigma=raw.get("jitter_sigma", 0.0),
            normalize=raw.get("normalize", True),
            deterministic=raw.get("deterministic", True),
            out=raw.get("out"),
        )

    def workload_label(self) -> str:
        if self.workload_path is not None:
            return self.workload_path
        s = self.synth
        return f"synth:{s['kind']}:n={s['n']}:pages={s['pages']}:seed={s['seed']}"


@dataclass
class ReplayLog:
    """Per-request accounting for one replay."""

    latency_us: np.ndarray
    eviction_latency_us: np.ndarray
    background_us: np.ndarray
    evicted_pages: np.ndarray
    targets: np.ndarray

    @property
    def total_latency_us(self) -> float:
        return float(self.latency_us.sum() + self.eviction_latency_us.sum()
                     + self.background_us.sum())

    def per_request_total_us(self) -> np.ndarray:
        return self.latency_us + self.eviction_latency_us + self.background_us


@dataclass
class MetricsReport:
    policy: str
    workload: str
    seed: int
    total_requests: int
    total_latency_us: float
    avg_request_latency_us: float
    normalized_latency: Optional[float]
    iops: float
    normalized_iops: Optional[float]
    eviction_count: int
    eviction_fraction: float
    fast_preference: float
    per_device_requests: list[int]
    loss_curve: list[float] = field(default_factory=list)

    CSV_FIELDS = ("policy", "workload", "seed", "total_requests",
                  "total_latency_us", "avg_request_latency_us",
                  "normalized_latency", "iops", "normalized_iops",
                  "eviction_count", "eviction_fraction", "fast_preference",
                  "per_device_requests")

    @staticmethod
    def csv_header() -> str:
        return ",".join(MetricsReport.CSV_FIELDS)

    def csv_row(self) -> str:
        def fmt(value: Any) -> str:
            if value is None:
                return ""
            if isinstance(value, float):
                return repr(value)
            if isinstance(value, list):
                return "|".join(str(v) for v in value)
            return str(value)

        return ",".join(fmt(getattr(self, name)) for name in self.CSV_FIELDS)

    def to_json(self) -> str:
        payload = {name: getattr(self, name) for name in self.CSV_FIELDS}
        payload["loss_curve"] = self.loss_curve
        return json.dumps(payload, indent=2)


def run_replay(workload: Workload, hss: Hss, policy: Policy) -> ReplayLog:
    """Drive every request through the policy and the storage model."""
    n = len(workload)
    latency = np.zeros(n)
    evict_lat = np.zeros(n)
    background = np.zeros(n)
    evicted = np.zeros(n, dtype=np.int64)
    targets = np.zeros(n, dtype=np.int64)
    victims = policy.victim_policy()
    for i, req in enumerate(workload):
        decision = policy.decide(req, i, hss)
        outcome = hss.service(req, decision.target_device, i, victims)
        policy.observe(req, i, outcome, hss)
        background[i] = policy.background(i, hss)
        latency[i] = outcome.latency_us
        evict_lat[i] = outcome.eviction_latency_us
        evicted[i] = outcome.evicted_pages
        targets[i] = decision.target_device
    policy.finalize()
    return ReplayLog(latency, evict_lat, background, evicted, targets)


def _device_spec(entry: Any) -> DeviceSpec:
    if isinstance(entry, str):
        if entry not in PRESETS:
            raise ConfigError(f"unknown device preset {entry!r}; have {sorted(PRESETS)}")
        return PRESETS[entry]
    if isinstance(entry, dict):
        try:
            return DeviceSpec(
                name=entry["name"],
                read_base_us=float(entry["read_base_us"]),
                write_base_us=float(entry["write_base_us"]),
                read_bw_mbps=float(entry["read_bw_mbps"]),
                write_bw_mbps=float(entry["write_bw_mbps"]),
                capacity_pages=entry.get("capacity_pages"),
            )
        except KeyError as exc:
            raise ConfigError(f"device object missing key {exc}") from None
    raise ConfigError(f"device entry must be a preset name or object, got {entry!r}")


def _default_fractions(n_devices: int) -> list[Optional[float]]:
    if n_devices == 1:
        return [None]
    if n_devices == 2:
        return [0.1, None]
    return [0.05, 0.1, None]


def build_workload(cfg: ExperimentConfig) -> Workload:
    if cfg.workload_path is not None:
        return load_msrc(cfg.workload_path, cfg.page_size)
    s = cfg.synth
    try:
        return synth_trace(SynthKind(s["kind"]), s["n"], s["pages"], s["seed"], cfg.page_size)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad synth spec {s!r}: {exc}") from None


def build_hss(cfg: ExperimentConfig, workload: Workload,
              unbounded: bool = False) -> Hss:
    specs = [_device_spec(entry) for entry in cfg.devices]
    fractions = cfg.capacity_fractions or _default_fractions(len(specs))
    if len(fractions) != len(specs):
        raise ConfigError("capacity_fractions length must match the device list")
    stats = workload_stats(workload)
    sized = []
    for spec, fraction in zip(specs, fractions):
        if unbounded:
            sized.append(spec.with_capacity(None))
        elif fraction is None:
            sized.append(spec)  # keep the spec's own capacity (presets: unbounded)
        else:
            sized.append(spec.with_capacity(fast_capacity_for(stats, fraction)))
    jitter_rng = None
    if cfg.jitter_sigma > 0:
        jitter_rng = _spawned_rng(cfg.seed, "jitter")
    return Hss(sized, cfg.page_size, cfg.jitter_sigma, jitter_rng)


class _SeededGauss:
    """Adapter giving numpy Generators the gauss() surface jitter expects."""

    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng

    def gauss(self, mu: float, sigma: float) -> float:
        return float(self.rng.normal(mu, sigma))


_RNG_STREAMS = {"jitter": 1}


def _spawned_rng(seed: int, label: str) -> _SeededGauss:
    child = np.random.SeedSequence(entropy=seed, spawn_key=(_RNG_STREAMS[label],))
    return _SeededGauss(np.random.default_rng(child))


def build_policy(cfg: ExperimentConfig, workload: Workload, hss: Hss) -> Policy:
    name = cfg.policy
    params = cfg.policy_params
    if name == "fast_only":
        return FastOnly()
    if name == "slow_only":
        return SlowOnly()
    if name == "always_fast":
        return AlwaysDevice(0)
    if name == "cde":
        return Cde(CdeConfig(**params)) if params else Cde()
    if name == "hps":
        return Hps(HpsConfig(**params)) if params else Hps()
    if name == "tri_heuristic":
        return TriHeuristic(TriConfig(**params)) if params else TriHeuristic()
    if name == "oracle":
        return OraclePolicy(workload, params.get("horizon"))
    if name == "sibyl":
        agent_params = dict(cfg.agent_params)
        v_min = agent_params.pop("v_min", None)
        v_max = agent_params.pop("v_max", None)
        n_atoms = agent_params.pop("n_atoms", 51)
        agent_params.setdefault("seed", cfg.seed)
        agent_params.setdefault("action_count", hss.n_devices)
        agent_cfg = AgentConfig(n_atoms=n_atoms, **agent_params)
        if v_min is not None and v_max is not None:
            support = AtomSupport(v_min, v_max, n_atoms)
        else:
            support = default_support([d.spec for d in hss.devices],
                                      hss.page_size, n_atoms, agent_cfg.gamma)
        agent = SibylAgent(agent_cfg, support, BinningConfig(), hss.n_devices,
                           concurrent=not cfg.deterministic)
        return SibylPolicy(agent)
    raise ConfigError(f"unknown policy {name!r}")


def run_experiment(cfg: ExperimentConfig,
                   _workload: Optional[Workload] = None) -> MetricsReport:
    """Replay the configured trace and compute the metrics report.

    Fast-Only and Slow-Only force unbounded capacities (their definition);
    when normalization is on, a Fast-Only replay of the same trace supplies
    the latency/IOPS denominators.
    """
    workload = _workload if _workload is not None else build_workload(cfg)
    if len(workload) == 0:
        raise TraceError("workload is empty")
    unbounded = cfg.policy in ("fast_only", "slow_only")
    hss = build_hss(cfg, workload, unbounded=unbounded)
    policy = build_policy(cfg, workload, hss)
    log = run_replay(workload, hss, policy)

    n = len(workload)
    total_us = log.total_latency_us
    report = MetricsReport(
        policy=cfg.policy,
        workload=cfg.workload_label(),
        seed=cfg.seed,
        total_requests=n,
        total_latency_us=total_us,
        avg_request_latency_us=total_us / n,
        normalized_latency=None,
        iops=n / (total_us / 1e6),
        normalized_iops=None,
        eviction_count=int(log.evicted_pages.sum()),
        eviction_fraction=float(log.evicted_pages.sum()) / n,
        fast_preference=float((log.targets == 0).sum()) / n,
        per_device_requests=[int((log.targets == d).sum()) for d in range(hss.n_devices)],
        loss_curve=list(getattr(getattr(policy, "agent", None), "losses", [])),
    )
    if cfg.normalize:
        if cfg.policy == "fast_only":
            base = report
        else:
            base_cfg = ExperimentConfig(
                workload_path=cfg.workload_path, synth=cfg.synth,
                page_size=cfg.page_size, devices=cfg.devices,
                capacity_fractions=cfg.capacity_fractions, policy="fast_only",
                seed=cfg.seed, jitter_sigma=cfg.jitter_sigma, normalize=False,
            )
            base = run_experiment(base_cfg, _workload=workload)
        report.normalized_latency = report.avg_request_latency_us / base.avg_request_latency_us
        report.normalized_iops = report.iops / base.iops
    return report


def _set_by_path(raw: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def sweep(base_raw: dict, grid: dict[str, list[Any]]) -> list[MetricsReport]:
    """One experiment per point of the cartesian grid, deterministic order.

    Grid keys are dotted config paths ("hss.capacity_fractions", "agent.gamma",
    "seed"); the base workload is loaded once and shared where unchanged.
    """
    if not grid:
        raise ConfigError("sweep grid is empty")
    keys = sorted(grid)
    cache: dict[str, Workload] = {}
    reports = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        raw = json.loads(json.dumps(base_raw))
        for key, value in zip(keys, combo):
            _set_by_path(raw, key, value)
        cfg = ExperimentConfig.from_dict(raw)
        label = cfg.workload_label() + f":ps={cfg.page_size}"
        if label not in cache:
            cache[label] = build_workload(cfg)
        reports.append(run_experiment(cfg, _workload=cache[label]))
    return reports


def write_csv(reports: Sequence[MetricsReport], dest: str) -> None:
    with open(dest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MetricsReport.csv_header() + "\n")
        for report in reports:
            fh.write(report.csv_row() + "\n")
