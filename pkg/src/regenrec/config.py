"""Pipeline configuration: nested dataclasses, JSON files, dotted overrides, stage seeds."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .bilevel import BilevelConfig
from .miner import MinerConfig
from .regenerator import RegeneratorConfig
from .target_models import TargetModelConfig

STAGES = ("data", "mine", "pretrain", "regenerate", "train", "evaluate")

DEFAULT_PLANTED = [
    [1, 2, 3, 4],
    [5, 6, 7],
    [8, 9, 10, 11],
    [12, 13, 14],
    [15, 16, 17, 18],
    [19, 20, 21],
    [22, 23, 24, 25],
    [26, 27, 28, 29],
]


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None  # dataset file; synthetic corpus when unset
    max_len: int = 50
    remap: bool = False
    num_users: int = 200
    num_items: int = 30
    noise_rate: float = 0.3
    planted_patterns: list = field(default_factory=lambda: [list(p) for p in DEFAULT_PLANTED])
    patterns_per_user: list = field(default_factory=lambda: [2, 5])


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    miner: MinerConfig = field(default_factory=lambda: MinerConfig(window_size=5, threshold=2))
    regenerator: RegeneratorConfig = field(default_factory=RegeneratorConfig)
    mine_source: str = "train"  # train | full: sequences used for mining and pre-training
    gamma: float = 0.1
    dedup: bool = False
    target: TargetModelConfig = field(default_factory=TargetModelConfig)
    bilevel: BilevelConfig = field(default_factory=BilevelConfig)
    union_original: bool = False  # also train on the original prefixes; the bi-level dev split stays within the regenerated set
    seed: int = 0
    compare_seeds: list = field(default_factory=lambda: [0, 1, 2])
    threads: int = 1
    out: str = "runs"

    def __post_init__(self):
        if self.mine_source not in ("train", "full"):
            raise ValueError(f"mine_source must be 'train' or 'full', got {self.mine_source!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        return _build(cls, raw)

    def stage_seed(self, stage: str, master: int | None = None) -> int:
        return derive_seed(self.seed if master is None else master, stage)


def _build(cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {raw!r}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) for {cls.__name__}: {', '.join(sorted(unknown))}")
    kwargs = {}
    defaults = cls()
    for name, value in raw.items():
        current = getattr(defaults, name)
        kwargs[name] = _build(type(current), value) if is_dataclass(current) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def derive_seed(master: int, stage: str) -> int:
    """Counter-based per-stage seed: stage i gets the i-th word of SeedSequence(master, i)."""
    index = STAGES.index(stage)
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0] & 0x7FFFFFFF)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key.sub=value`` overrides to a nested config dict (values parsed as JSON when possible)."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key")
        node[parts[-1]] = parse_value(value)
    return raw


def load_config(path=None, overrides=None, seed=None, out=None) -> PipelineConfig:
    raw = PipelineConfig().to_dict()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        _merge(raw, json.loads(p.read_text(encoding="utf-8")))
    apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = str(out)
    return PipelineConfig.from_dict(raw)


def _merge(base: dict, update: dict):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def write_echo(cfg: PipelineConfig, path, **extra) -> None:
    """Write every effective value (plus stage seeds and extras) as JSON."""
    payload = cfg.to_dict()
    payload["_stage_seeds"] = {s: cfg.stage_seed(s) for s in STAGES}
    payload.update({f"_{k}": v for k, v in extra.items()})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_echo(path) -> PipelineConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return PipelineConfig.from_dict({k: v for k, v in raw.items() if not k.startswith("_")})
