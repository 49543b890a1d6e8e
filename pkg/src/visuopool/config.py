"""Experiment configuration: four YAML sections with documented defaults.

Unknown keys are rejected; missing keys take the defaults below. The resolved
config (``to_dict``) is embedded in every artifact that the pipeline writes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .env import EnvConfig
from .pooling import POOLING_KINDS, ConfigurationError

FORMAT_VERSION = 1
CONDITIONS = ("in_domain", "lighting", "texture")


@dataclass(frozen=True)
class EnvSection:
    height: int = 8
    width: int = 8
    dim: int = 64
    horizon: int = 60
    success_radius: float = 0.05
    position_gain: float = 2.0
    nuisance_scale: float = 0.005
    goal_on_cells: bool = True
    master_seed: int = 0
    n_demos: int = 25
    demo_seed: int = 0

    def env_config(self) -> EnvConfig:
        return EnvConfig(height=self.height, width=self.width, dim=self.dim, horizon=self.horizon,
                         success_radius=self.success_radius, position_gain=self.position_gain,
                         nuisance_scale=self.nuisance_scale, goal_on_cells=self.goal_on_cells,
                         master_seed=self.master_seed)


@dataclass(frozen=True)
class PoolingSection:
    kind: str = "afa"
    heads: int = 4
    output_dim: int = 64
    tokens: int = 4
    tl_hidden: int = 32
    hidden: tuple[int, int, int] = (256, 256, 256)
    temporal_dim: int = 8

    def __post_init__(self):
        if self.kind not in POOLING_KINDS:
            raise ConfigurationError(f"unknown pooling kind {self.kind!r}; expected one of {POOLING_KINDS}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class TrainSection:
    steps: int = 5000
    batch_size: int = 128
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.05
    sigma: float = 0.1
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    log_every: int = 50
    stats_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.stats_every < 1:
            raise ConfigurationError("stats_every must be >= 1")
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigurationError("warmup_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class EvalSection:
    episodes: int = 100
    conditions: tuple[str, ...] = CONDITIONS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple(self.conditions))
        unknown = set(self.conditions) - set(CONDITIONS)
        if unknown:
            raise ConfigurationError(f"unknown eval conditions {sorted(unknown)}")


_SECTIONS = {"env": EnvSection, "pooling": PoolingSection, "train": TrainSection, "eval": EvalSection}


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    pooling: PoolingSection = field(default_factory=PoolingSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        data = data or {}
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section in _SECTIONS.items():
            values = data.get(name) or {}
            allowed = {f.name for f in fields(section)}
            bad = set(values) - allowed
            if bad:
                raise ConfigurationError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = section(**values)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seeds=(seed,)))

    def with_pooling(self, **kwargs) -> "ExperimentConfig":
        return replace(self, pooling=replace(self.pooling, **kwargs))

    def model_hash(self) -> str:
        """Digest of the sections that fix the network's shapes and the frozen encoder."""
        d = self.to_dict()
        blob = json.dumps({"env": d["env"], "pooling": d["pooling"]}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
