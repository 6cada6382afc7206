"""Experiment configuration: nested dataclasses loaded from JSON with strict
key checking and field-level error messages."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from typing import List, Optional

from .errors import ConfigError

MODES = ("fedslate", "fedslate-extended", "slateq-standalone", "random", "fedslate-ablated")


@dataclass
class EnvConfig:
    num_candidates: int = 50
    slate_size: int = 5
    corpus_size: Optional[int] = None
    # document set is part of the environment; None draws it from seeds.env
    corpus_seed: Optional[int] = 0
    budget: float = 20.0
    budget_consumption: str = "step"
    step_cost: float = 1.0
    null_score: float = 1.0
    tau: float = 1.0
    mem_discount: float = 0.7
    nke_noise_std: float = 0.1
    obs_noise_std: float = 0.05
    nke_init: float = 0.0
    mu_kale: float = 2.5
    sigma_kale: float = 0.1
    mu_choc: float = 3.0
    sigma_choc: float = 0.2
    satisfaction_scales_engagement: bool = True
    mode: str = "coupled"
    order: str = "alternate"


@dataclass
class NetConfig:
    local_hidden: List[int] = field(default_factory=lambda: [256, 128, 64, 32, 16])
    # at least as wide as the default N: a narrow last layer caps the rank of the item values
    global_hidden: List[int] = field(default_factory=lambda: [64, 64, 64, 64, 64])
    ablated_hidden: List[int] = field(default_factory=lambda: [64])


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    huber_delta: float = 1.0
    local_kind: str = "sgd"
    local_step_size: float = 0.1


@dataclass
class ExplorationConfig:
    start: float = 1.0
    end: float = 0.05
    anneal_fraction: float = 0.2


@dataclass
class SeedConfig:
    env: int = 0
    nets: int = 1
    sampling: int = 2


@dataclass
class EtrorConfig:
    window: int = 20
    epsilon: float = 5.0


@dataclass
class ExperimentConfig:
    mode: str = "fedslate"
    episodes: int = 2000
    gamma: float = 0.9
    batch_size: int = 64
    buffer_capacity: int = 10000
    learn_every: int = 4
    target_sync: int = 25
    is_learn: bool = True
    slate_strategy: str = "greedy"
    env: EnvConfig = field(default_factory=EnvConfig)
    nets: NetConfig = field(default_factory=NetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    exploration: ExplorationConfig = field(default_factory=ExplorationConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    etror: EtrorConfig = field(default_factory=EtrorConfig)
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    message_log: bool = False
    trajectory_log: bool = False
    record_wall_time: bool = False

    @property
    def extended(self):
        return self.mode == "fedslate-extended"

    @property
    def federated(self):
        return self.mode in ("fedslate", "fedslate-extended", "fedslate-ablated")

    def validate(self):
        problems = []
        e = self.env
        if self.mode not in MODES:
            problems.append(f"mode: must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.episodes < 0:
            problems.append("episodes: must be >= 0")
        if not 0 <= self.gamma <= 1:
            problems.append("gamma: must lie in [0, 1]")
        for name in ("batch_size", "buffer_capacity", "learn_every", "target_sync"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.batch_size > self.buffer_capacity:
            problems.append("batch_size: cannot exceed buffer_capacity")
        if self.slate_strategy not in ("greedy", "topk"):
            problems.append("slate_strategy: must be 'greedy' or 'topk'")
        if e.num_candidates < 1:
            problems.append("env.num_candidates: must be >= 1")
        if not 1 <= e.slate_size <= e.num_candidates:
            problems.append("env.slate_size: must lie in [1, env.num_candidates]")
        if e.corpus_size is not None and e.corpus_size < e.num_candidates:
            problems.append("env.corpus_size: must be >= env.num_candidates")
        if e.budget <= 0:
            problems.append("env.budget: must be positive")
        if e.budget_consumption not in ("step", "engagement"):
            problems.append("env.budget_consumption: must be 'step' or 'engagement'")
        if e.step_cost <= 0:
            problems.append("env.step_cost: must be positive")
        if e.null_score < 0:
            problems.append("env.null_score: must be >= 0")
        if e.tau <= 0:
            problems.append("env.tau: must be positive")
        if not 0 <= e.mem_discount < 1:
            problems.append("env.mem_discount: must lie in [0, 1)")
        for name in ("nke_noise_std", "obs_noise_std", "sigma_kale", "sigma_choc"):
            if getattr(e, name) < 0:
                problems.append(f"env.{name}: must be >= 0")
        if e.mode not in ("coupled", "sparse"):
            problems.append("env.mode: must be 'coupled' or 'sparse'")
        if e.order not in ("alternate", "random"):
            problems.append("env.order: must be 'alternate' or 'random'")
        for name in ("local_hidden", "global_hidden", "ablated_hidden"):
            widths = getattr(self.nets, name)
            if not widths or any(w < 1 for w in widths):
                problems.append(f"nets.{name}: must be a non-empty list of positive widths")
        if len(self.nets.ablated_hidden) != 1:
            problems.append("nets.ablated_hidden: the ablated global net has exactly one hidden layer")
        o = self.optimizer
        if o.kind not in ("adam", "sgd"):
            problems.append("optimizer.kind: must be 'adam' or 'sgd'")
        if o.local_kind not in ("adam", "sgd"):
            problems.append("optimizer.local_kind: must be 'adam' or 'sgd'")
        if o.local_step_size <= 0:
            problems.append("optimizer.local_step_size: must be positive")
        if o.step_size <= 0:
            problems.append("optimizer.step_size: must be positive")
        if o.huber_delta <= 0:
            problems.append("optimizer.huber_delta: must be positive")
        x = self.exploration
        if not (0 <= x.end <= 1 and 0 <= x.start <= 1):
            problems.append("exploration: start and end must lie in [0, 1]")
        if not 0 <= x.anneal_fraction <= 1:
            problems.append("exploration.anneal_fraction: must lie in [0, 1]")
        if self.etror.window < 1:
            problems.append("etror.window: must be >= 1")
        if self.etror.epsilon < 0:
            problems.append("etror.epsilon: must be >= 0")
        if self.checkpoint_every < 0:
            problems.append("checkpoint_every: must be >= 0")
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with top-level or dotted (``env.mode``) fields changed."""
        data = self.to_dict()
        for key, value in changes.items():
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = value
        return from_dict(data)


def _coerce(tp, value, path, problems):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            problems.append(f"{path}: expected an object")
            return None
        return _build(tp, value, path, problems)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path, problems)
    if origin in (list, List):
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list")
            return None
        return [_coerce(inner, v, f"{path}[{i}]", problems) for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number")
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string")
        return value
    return value


def _build(cls, data: dict, prefix: str, problems):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            problems.append(f"{prefix + '.' if prefix else ''}{key}: unknown key")
    kwargs = {}
    for name in names:
        if name in data:
            path = f"{prefix}.{name}" if prefix else name
            kwargs[name] = _coerce(hints[name], data[name], path, problems)
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    problems: List[str] = []
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    cfg = _build(ExperimentConfig, data, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg.validate()


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return from_dict(data)


def dump(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
