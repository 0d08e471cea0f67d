"""Structural-similarity rewards computed from a :class:`MetricsReport`."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import ConfigError
from .metrics import MetricsReport

BASE_KINDS = ("tm", "gdt", "rmsd", "gdt_rmsd")


@dataclass(frozen=True)
class RewardConfig:
    base_kind: str = "gdt_rmsd"
    w_gdt_scale: float = 5.0
    w_tm_scale: float = 5.0
    w_rmsd_scale: float = 0.5
    w_bonus_gdt: float = 100.0
    w_bonus_rmsd: float = 20.0
    tau_gdt: float = 0.5
    tau_rmsd: float = 2.0

    def __post_init__(self):
        if self.base_kind not in BASE_KINDS:
            raise ConfigError(f"unknown reward kind {self.base_kind!r}; choose from {BASE_KINDS}")
        weights = (self.w_gdt_scale, self.w_tm_scale, self.w_rmsd_scale, self.w_bonus_gdt, self.w_bonus_rmsd)
        if any(w <= 0 for w in weights):
            raise ConfigError("reward weights must be positive")
        if not 0 < self.tau_gdt < 1:
            raise ConfigError(f"tau_gdt must lie in (0, 1), got {self.tau_gdt}")
        if self.tau_rmsd <= 0:
            raise ConfigError(f"tau_rmsd must be positive, got {self.tau_rmsd}")

    def to_dict(self):
        return asdict(self)


def base_reward(cfg: RewardConfig, m: MetricsReport) -> float:
    gdt = (m.gdt_ts * cfg.w_gdt_scale) ** 2
    tm = (m.tm_score * cfg.w_tm_scale) ** 2
    rmsd = -((m.rmsd * cfg.w_rmsd_scale) ** 2)
    if cfg.base_kind == "gdt":
        return gdt
    if cfg.base_kind == "tm":
        return tm
    if cfg.base_kind == "rmsd":
        return rmsd
    return rmsd + gdt


def bonus_reward(cfg: RewardConfig, m: MetricsReport) -> float:
    """Designability bonus; the GDT_TS branch wins whenever both thresholds are met."""
    if m.gdt_ts > cfg.tau_gdt:
        return (m.gdt_ts - cfg.tau_gdt) * cfg.w_bonus_gdt
    if m.rmsd < cfg.tau_rmsd:
        return (cfg.tau_rmsd - m.rmsd) * cfg.w_bonus_rmsd
    return 0.0


def total_reward(cfg: RewardConfig, m: MetricsReport) -> float:
    return base_reward(cfg, m) + bonus_reward(cfg, m)


def reward_breakdown(cfg: RewardConfig, m: MetricsReport) -> dict:
    base = base_reward(cfg, m)
    bonus = bonus_reward(cfg, m)
    return {"base": base, "bonus": bonus, "total": base + bonus}
