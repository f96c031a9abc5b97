"""Experiment configuration

:class:`ExperimentConfig` is a tree of dataclasses with the defaults used by every experiment.
YAML files and dotted ``section.field`` overrides are overlaid on it; unknown keys are
rejected. :func:`config_hash` identifies a configuration in every output file.

"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from cqlearn.envs.highway import EnvConfig
from cqlearn.errors import ConfigError
from cqlearn.highway_constraints import HighwayConstraintParams

EXPERIMENTS = ("fig3", "tree-sweep", "collect", "train", "search", "eval", "plot-data")


@dataclass(frozen=True)
class TabularConfig:
    """Tree-MDP sweep and tabular learning parameters"""

    branches: tuple = tuple(range(1, 11))
    seeds: int = 20
    max_episodes: int = 5000
    epsilon: float = 0.1
    alpha: float = 0.1
    alpha_j: float = 0.1
    patience: int = 50
    max_episode_steps: int = 200
    q_init: float = 0.0
    exploration: str = "safe"
    penalty: float | None = None
    algorithms: tuple = ("constrained_q", "reward_shaped")
    tail_length: int = 150
    gap_length: int = 0

    def __post_init__(self):
        if self.exploration not in {"full", "safe"}:
            raise ConfigError(f"unknown exploration mode {self.exploration!r}")
        if min(self.branches, default=0) < 1 or self.tail_length < 0 or self.gap_length < 0:
            raise ConfigError("branches must be >= 1, tail and gap lengths >= 0")


@dataclass(frozen=True)
class DeepConfig:
    """fixed-batch training parameters"""

    method: str = "cdqn_msc"
    n_transitions: int = 50_000
    steps: int = 100_000
    batch_size: int = 64
    lr: float = 1e-4
    tau: float = 1e-3
    gamma: float = 0.99
    optimizer: str = "adam"
    log_every: int = 1000
    eval_every: int = 0
    seeds: tuple = tuple(range(10))
    collection_vehicle_counts: tuple = (20, 40, 60, 80)
    phi: tuple = (20, 80)
    rho: tuple = (80, 20)
    trunk: tuple = (100, 100)
    lambda_lc: float = 0.0
    lambda_kr: float = 0.0
    lambda_safe: float = 0.0
    lambda_comfort: float = 0.0

    def __post_init__(self):
        methods = {"dqn", "cdqn", "cdqn_msc", "reward_shaping", "loss_penalty"}
        if self.method not in methods:
            raise ConfigError(f"unknown method {self.method!r}, expected one of {sorted(methods)}")
        if self.batch_size < 1 or self.steps < 0 or self.n_transitions < 0:
            raise ConfigError("batch_size must be >= 1, steps and n_transitions >= 0")

    def weights(self) -> dict:
        return {k: getattr(self, k) for k in ("lambda_lc", "lambda_kr", "lambda_safe", "lambda_comfort")}


@dataclass(frozen=True)
class EvalConfig:
    """evaluation protocol; ``spe`` selects ``"safety"`` or ``"full"`` extraction for baselines"""

    n_episodes: int = 100
    vehicle_counts: tuple = (20, 40, 60, 80)
    spe: str = "safety"

    def __post_init__(self):
        if self.spe not in {"safety", "full", "none"}:
            raise ConfigError(f"unknown extraction mode {self.spe!r}")


@dataclass(frozen=True)
class SearchSpace:
    """log-uniform random search over the penalty weights of a baseline"""

    method: str = "reward_shaping"
    ranges: dict = field(
        default_factory=lambda: {
            "reward_shaping": {"lambda_lc": (1e-3, 10.0), "lambda_kr": (1e-3, 10.0)},
            "loss_penalty": {"lambda_safe": (1e-3, 10.0), "lambda_kr": (1e-3, 10.0), "lambda_comfort": (1e-3, 10.0)},
        }
    )
    n_samples: int = 50
    budget_fraction: float = 0.5
    n_permutations: int = 10_000

    def __post_init__(self):
        if self.method not in self.ranges:
            raise ConfigError(f"no search ranges for method {self.method!r}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        for name, (low, high) in self.ranges[self.method].items():
            if not 0.0 < low <= high:
                raise ConfigError(f"search range of {name} must be positive and ordered")

    def bounds(self) -> dict:
        return {k: (float(lo), float(hi)) for k, (lo, hi) in self.ranges[self.method].items()}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "fig3"
    output_dir: str = "results"
    workers: int = 1
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    constraints: HighwayConstraintParams = field(default_factory=HighwayConstraintParams)
    tabular: TabularConfig = field(default_factory=TabularConfig)
    deep: DeepConfig = field(default_factory=DeepConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    search: SearchSpace = field(default_factory=SearchSpace)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def _coerce(default, value):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def overlay(config, data: dict, prefix: str = ""):
    """return ``config`` with the nested mapping ``data`` applied

    Raises
    ------
    ConfigError
        for unknown keys or values rejected by the dataclass validation.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for section {prefix.rstrip('.') or 'root'}")
    names = {f.name for f in dataclasses.fields(config)}
    changes = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}{key}")
        current = getattr(config, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            changes[key] = overlay(current, value, f"{prefix}{key}.")
        else:
            changes[key] = _coerce(current, value)
    try:
        return dataclasses.replace(config, **changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in section {prefix.rstrip('.') or 'root'}: {exc}") from exc


def apply_overrides(config, overrides: dict):
    """apply dotted ``section.field`` overrides, e.g. ``{"deep.steps": 100}``"""
    nested = {}
    for dotted, value in overrides.items():
        node = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return overlay(config, nested)


def load_config(path=None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """defaults (or ``base``) overlaid with the YAML file at ``path``"""
    config = base or ExperimentConfig()
    if path is None:
        return config
    try:
        with open(path, "r", encoding="utf-8") as fp:
            data = yaml.safe_load(fp) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    return overlay(config, data)


def config_to_dict(config) -> dict:
    """plain, JSON-serializable form (tuples become lists)"""
    return json.loads(json.dumps(dataclasses.asdict(config), default=list))


def save_config(config, path):
    with open(path, "w", encoding="utf-8") as fp:
        yaml.safe_dump(config_to_dict(config), fp, sort_keys=True)


RUN_ONLY_KEYS = ("experiment", "output_dir", "workers")


def config_hash(config) -> str:
    """first 16 hex characters of SHA-256 over the canonical JSON form

    ``RUN_ONLY_KEYS`` only select what runs and where it writes; they are not hashed.
    """
    data = {k: v for k, v in config_to_dict(config).items() if k not in RUN_ONLY_KEYS}
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
