"""Run configuration: one YAML file per run, validated on load."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .estimator import POLICY_MODES, REWARD_KINDS, validate_mode
from .ppo import PPOConfig
from .world import WorldSpec, default_world_config, world_from_dict


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class BackboneConfig:
    n_steps: int = 3000
    hidden: tuple = (256, 256)
    batch_size: int = 256
    learning_rate: float = 1e-3
    class_dropout: float = 0.1
    n_train: int = 20000


@dataclass
class SamplerConfig:
    T: int = 4
    lam: float = 1.0
    k: float = 3.0
    tau1: float = 1.0


@dataclass
class PolicyConfig:
    mode: str = "adaptive"
    hidden: int = 64


@dataclass
class RewardConfig:
    kind: str = "adversarial"
    group_size: int = 32
    external_hook: list | None = None
    disc_objective: str = "bce"


@dataclass
class EvalConfig:
    n_reference: int = 4000
    n_eval: int = 1000
    eval_every: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    world: dict = field(default_factory=default_world_config)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        try:
            validate_mode(self.policy.mode, self.reward.kind)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.reward.disc_objective not in ("bce", "literal"):
            raise ConfigError("reward.disc_objective must be 'bce' or 'literal'")
        if self.sampler.T < 1:
            raise ConfigError("sampler.T must be >= 1")
        if self.reward.kind == "external" and not self.reward.external_hook:
            raise ConfigError("external reward needs reward.external_hook (a command)")
        if self.eval.n_eval < 2 or self.eval.n_reference < 2:
            raise ConfigError("evaluation needs at least 2 samples")
        try:
            self.world_spec()
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad world section: {exc}") from None
        return self

    def world_spec(self) -> WorldSpec:
        return world_from_dict(self.world)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["hidden"] = list(self.backbone.hidden)
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.dump())


_SECTIONS = {"backbone": BackboneConfig, "sampler": SamplerConfig, "policy": PolicyConfig,
             "reward": RewardConfig, "ppo": PPOConfig, "eval": EvalConfig}


def _section(cls, values, name):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    values = dict(values)
    if name == "backbone" and "hidden" in values:
        values["hidden"] = tuple(values["hidden"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {name!r} section: {exc}") from None


def config_from_dict(d: dict | None) -> RunConfig:
    d = copy.deepcopy(d or {})
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = set(d) - {"seed", "world", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {name: _section(cls, d.get(name), name) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(seed=int(d.get("seed", 0)), **kw)
    if "world" in d:
        cfg.world = d["world"]
    return cfg.validate()


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML run config (defaults when ``path`` is None) and apply overrides.

    ``overrides`` maps dotted keys such as ``"ppo.policy_lr"`` to values.
    """
    d = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    for key, val in (overrides or {}).items():
        node = d
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = val
    return config_from_dict(d)


__all__ = ["ConfigError", "RunConfig", "load_config", "config_from_dict", "POLICY_MODES", "REWARD_KINDS"]
