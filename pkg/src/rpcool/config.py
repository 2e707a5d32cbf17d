"""Runtime and orchestrator configuration.

Admin settings come from a TOML-style `key = value` file plus environment
overrides; everything has a workable default for single-host use.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .lowlevel import PAGE_SIZE

ENV_ORCH = "RPCOOL_ORCH"
ENV_POOL_DIR = "RPCOOL_POOL_DIR"
ENV_SANDBOX_MODE = "RPCOOL_SANDBOX_MODE"
ENV_FALLBACK_LISTEN = "RPCOOL_FALLBACK_LISTEN"

DEFAULT_ORCH_ENDPOINT = ("127.0.0.1", 7470)
DEFAULT_POOL_DIR = "/dev/shm/rpcool"
DEFAULT_POOL_BASE = 0x7C00_0000_0000
DEFAULT_POOL_SPAN = 1 << 40  # 1 TiB of address space
DEFAULT_QUOTA = 256 << 20
DEFAULT_LEASE_PERIOD = 1.0
LEASE_MISSES_BEFORE_EXPIRY = 3


def parse_endpoint(s: str) -> tuple[str, int]:
    host, _, port = s.rpartition(":")
    return host or "127.0.0.1", int(port)


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.startswith('"') and raw.endswith('"'):
        return raw[1:-1]
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return int(raw, 0)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def load_admin_file(path: str) -> dict:
    """Parse a flat `key = value` admin file (strings, ints incl. hex, floats).

    Dotted keys like `quota.holder-name = 0x1000` configure per-holder quotas.
    """
    out: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("["):
                continue
            if "=" not in line:
                continue
            key, _, raw = line.partition("=")
            out[key.strip()] = _parse_value(raw)
    return out


@dataclass
class OrchestratorConfig:
    endpoint: tuple[str, int] = DEFAULT_ORCH_ENDPOINT
    pool_base: int = DEFAULT_POOL_BASE
    pool_span: int = DEFAULT_POOL_SPAN
    default_quota: int = DEFAULT_QUOTA
    lease_period: float = DEFAULT_LEASE_PERIOD
    lease_misses: int = LEASE_MISSES_BEFORE_EXPIRY
    sweep_interval: float = 0.1
    holder_quotas: dict[str, int] = field(default_factory=dict)
    journal_path: str | None = None

    @property
    def lease_ttl(self) -> float:
        return self.lease_period * self.lease_misses

    @classmethod
    def from_admin_file(cls, path: str) -> "OrchestratorConfig":
        kv = load_admin_file(path)
        cfg = cls()
        if "endpoint" in kv:
            cfg.endpoint = parse_endpoint(str(kv["endpoint"]))
        for name in ("pool_base", "pool_span", "default_quota", "lease_misses"):
            if name in kv:
                setattr(cfg, name, int(kv[name]))
        for name in ("lease_period", "sweep_interval"):
            if name in kv:
                setattr(cfg, name, float(kv[name]))
        if "journal_path" in kv:
            cfg.journal_path = str(kv["journal_path"])
        for key, val in kv.items():
            if key.startswith("quota."):
                cfg.holder_quotas[key[len("quota."):]] = int(val)
        return cfg


@dataclass
class RuntimeConfig:
    page_size: int = PAGE_SIZE
    pool_dir: str = DEFAULT_POOL_DIR
    orch_endpoint: tuple[str, int] = DEFAULT_ORCH_ENDPOINT
    # protection-key budget: 16 total, 2 reserved (private memory;
    # unsandboxed shared regions), 14 usable as cached sandbox slots
    keys_total: int = 16
    keys_reserved: int = 2
    batch_release_threshold: int = 1024
    # adaptive busy-wait: sleep 0 under 25% load, 5 us up to 50%, 150 us above
    busywait_thresholds: tuple[float, float] = (0.25, 0.50)
    busywait_sleeps: tuple[float, float, float] = (0.0, 5e-6, 150e-6)
    lease_renew_period: float = DEFAULT_LEASE_PERIOD
    sandbox_mode: str = "auto"  # auto | portable
    sandbox_arena_size: int = 1 << 20
    fallback_listen: tuple[str, int] | None = None
    ring_capacity: int = 1024
    seal_ring_capacity: int = 4096
    worker_threads: int = 2
    has_pool_access: bool = True

    def __post_init__(self):
        if self.page_size <= 0 or self.keys_total <= 0 or self.batch_release_threshold <= 0:
            raise ValueError("config values must be positive")
        lo, hi = self.busywait_thresholds
        if not (0 < lo < hi < 1):
            raise ValueError("busy-wait thresholds must be ordered inside (0, 1)")

    @property
    def keys_cached(self) -> int:
        return self.keys_total - self.keys_reserved

    @classmethod
    def from_env(cls, **overrides) -> "RuntimeConfig":
        cfg = cls(**overrides)
        if ENV_POOL_DIR in os.environ and "pool_dir" not in overrides:
            cfg.pool_dir = os.environ[ENV_POOL_DIR]
        if ENV_ORCH in os.environ and "orch_endpoint" not in overrides:
            cfg.orch_endpoint = parse_endpoint(os.environ[ENV_ORCH])
        if ENV_SANDBOX_MODE in os.environ and "sandbox_mode" not in overrides:
            cfg.sandbox_mode = os.environ[ENV_SANDBOX_MODE]
        if ENV_FALLBACK_LISTEN in os.environ and "fallback_listen" not in overrides:
            cfg.fallback_listen = parse_endpoint(os.environ[ENV_FALLBACK_LISTEN])
        return cfg
