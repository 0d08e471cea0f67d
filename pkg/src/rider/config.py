"""Run configuration: flat ``section.key = value`` files with baked-in defaults.

Lines starting with ``#`` and blank lines are ignored. Values are parsed as
JSON when possible (numbers, booleans, lists, quoted strings) and otherwise
kept as bare strings. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .diffusion import MIN_STD, NoiseSchedule
from .errors import ConfigError
from .policy import POLICY_KINDS
from .rewards import RewardConfig
from .rl import RlConfig


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 50
    temperature: float = 0.1
    n_samples: int = 16
    min_std: float = MIN_STD

    def __post_init__(self):
        if self.n_steps < 1 or self.n_samples < 1:
            raise ConfigError("sampler.n_steps and sampler.n_samples must be >= 1")
        if self.temperature < 0:
            raise ConfigError("sampler.temperature must be >= 0")
        if self.min_std <= 0:
            raise ConfigError("sampler.min_std must be positive")


@dataclass(frozen=True)
class EncoderConfig:
    k: int = 32
    layers: int = 5
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.k < 1 or self.layers < 0:
            raise ConfigError("encoder.k must be >= 1 and encoder.layers >= 0")


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 500
    learning_rate: float = 1e-4
    batch_size: int = 64
    n_tasks: int = 5
    task_length: int = 20
    task_seed: int = 1000
    init_scale: float = 0.02
    n_probes: int = 64
    policy: str = "preconditioned"

    def __post_init__(self):
        if self.policy not in POLICY_KINDS:
            raise ConfigError(f"pretrain.policy must be one of {sorted(POLICY_KINDS)}, got {self.policy!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.n_tasks < 1 or self.n_probes < 1:
            raise ConfigError("pretrain needs iterations >= 0 and batch_size, n_tasks, n_probes >= 1")
        if self.task_length < 4:
            raise ConfigError("pretrain.task_length must be >= 4")
        if self.learning_rate <= 0 or self.init_scale < 0:
            raise ConfigError("pretrain.learning_rate must be positive")


@dataclass(frozen=True)
class OracleConfig:
    kind: str = "helix"
    cmd: str = ""
    workdir: str = ""
    timeout_s: float = 600.0
    pool_size: int = 1

    def __post_init__(self):
        if self.kind not in ("helix", "subprocess", "none"):
            raise ConfigError(f"oracle.kind must be helix, subprocess or none, got {self.kind!r}")
        if self.kind == "subprocess" and not ("{fasta}" in self.cmd and "{out_pdb}" in self.cmd):
            raise ConfigError("oracle.cmd must contain {fasta} and {out_pdb}")
        if self.timeout_s <= 0 or self.pool_size < 1:
            raise ConfigError("oracle.timeout_s must be positive and oracle.pool_size >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)


SECTIONS = ("schedule", "sampler", "encoder", "pretrain", "reward", "rl", "oracle")


def _section_fields(name):
    return {f.name: f for f in fields(getattr(RunConfig(), name))}


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    return value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(text: str, source: str = "<config>") -> dict:
    """Parse config text into ``{"seed": v, section: {key: v}}`` without validation of ranges."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out_key = key
        if key == "seed":
            out["seed"] = _parse_value(value)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{source}:{lineno}: unknown key {out_key!r}")
        if name not in _section_fields(section):
            raise ConfigError(f"{source}:{lineno}: unknown key {out_key!r}")
        out.setdefault(section, {})[name] = _parse_value(value)
    return out


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return ``cfg`` with ``overrides`` applied; every section is re-validated."""
    updates = {}
    if "seed" in overrides:
        updates["seed"] = _coerce(overrides["seed"], 0, "seed")
    for section in SECTIONS:
        if section not in overrides:
            continue
        current = getattr(cfg, section)
        known = _section_fields(section)
        values = {}
        for name, value in overrides[section].items():
            if name not in known:
                raise ConfigError(f"unknown key {section}.{name}")
            values[name] = _coerce(value, getattr(current, name), f"{section}.{name}")
        updates[section] = replace(current, **values)
    return replace(cfg, **updates)


def load_config(path=None, text: str | None = None) -> RunConfig:
    if path is not None:
        text = Path(path).read_text()
        source = str(path)
    else:
        source = "<config>"
    if not text:
        return RunConfig()
    return apply_overrides(RunConfig(), parse_overrides(text, source))


def _format_value(value):
    if isinstance(value, tuple):
        value = list(value)
    if isinstance(value, str):
        return value
    return json.dumps(value)


def config_items(cfg: RunConfig) -> list[tuple[str, object]]:
    items = [("seed", cfg.seed)]
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            items.append((f"{section}.{f.name}", getattr(obj, f.name)))
    return items


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{key} = {_format_value(value)}\n" for key, value in config_items(cfg))


def config_to_dict(cfg: RunConfig) -> dict:
    return {key: (list(v) if isinstance(v, tuple) else v) for key, v in config_items(cfg)}
